use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "specbound", version, about = "Early-exit self-speculative decoding on a toy transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a model, train its exit heads and save a checkpoint
    BuildTrain(BuildTrainArgs),
    /// Decode prompts with bounded speculation and write per-round traces
    Decode(DecodeArgs),
    /// Check engine output against full-depth greedy decoding over a config grid
    Verify(VerifyArgs),
    /// Per-layer predictions and confidences over a greedy continuation
    LayerScan(LayerScanArgs),
    /// Sweep one engine parameter and report replayed speedup and compression
    Sweep(SweepArgs),
    /// Evaluate the closed-form round time, accepted count and speedup
    ModelEval(ModelEvalArgs),
    /// Monte-Carlo estimate of accepted drafts per round
    Mc(McArgs),
    /// Replay a trace file through the layer-cost model
    Replay(ReplayArgs),
    /// Histogram of per-prompt replayed speedups from a trace file
    SpeedupDist(SpeedupDistArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct CheckpointArg {
    /// Model checkpoint
    #[arg(long, env = "SPECBOUND_CHECKPOINT")]
    pub checkpoint: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct PromptArgs {
    /// File with one prompt per line as space-separated token ids
    #[arg(long, conflicts_with = "random_prompts")]
    pub prompts: Option<PathBuf>,
    /// Generate this many random prompts instead
    #[arg(long)]
    pub random_prompts: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub prompt_seed: u64,
    #[arg(long, default_value_t = 8)]
    pub min_len: usize,
    #[arg(long, default_value_t = 32)]
    pub max_len: usize,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct EngineArgs {
    /// TOML engine config; flags below override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub anneal_alpha: Option<f64>,
    /// Clamped to L-1 with a warning
    #[arg(long)]
    pub d_max: Option<usize>,
    #[arg(long)]
    pub w_max: Option<usize>,
    /// greedy, temperature:<t> or top_p:<p>:<t>
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    /// Exclude bonus tokens from replayed speedup
    #[arg(long)]
    pub paper_faithful_bonus: bool,
    /// Align depth-bound rounds to the deepest exit instead of d_max
    #[arg(long)]
    pub align_deepest_exit: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct BuildTrainArgs {
    /// Checkpoint path to write
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 12)]
    pub layers: usize,
    #[arg(long, default_value_t = 32)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 64)]
    pub vocab: usize,
    #[arg(long, default_value_t = 256)]
    pub max_context: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub sequences: usize,
    #[arg(long, default_value_t = 64)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.02)]
    pub step_size: f64,
    #[arg(long, default_value_t = 1)]
    pub corpus_seed: u64,
    /// Read every layer out through the final head instead of trained heads
    #[arg(long)]
    pub oracle_heads: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub checkpoint: CheckpointArg,
    #[command(flatten)]
    pub prompts: PromptArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
    /// JSONL trace output
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
    /// Generated tokens, one line per prompt (stdout if absent)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub checkpoint: CheckpointArg,
    #[command(flatten)]
    pub prompts: PromptArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [0.3, 0.55, 0.8, 0.99])]
    pub thresholds: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.2, 1.0])]
    pub alphas: Vec<f64>,
    /// Defaults to 1, 4 and L-1
    #[arg(long, value_delimiter = ',')]
    pub d_max_values: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 4, 8])]
    pub w_max_values: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    pub max_new_tokens: usize,
    /// JSON report with per-prompt comparisons
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, hide = true)]
    pub fault_verifier: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct LayerScanArgs {
    #[command(flatten)]
    pub checkpoint: CheckpointArg,
    /// Context as space-separated token ids
    #[arg(long)]
    pub context: String,
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long, default_value_t = 0.55)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0.2)]
    pub anneal_alpha: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub checkpoint: CheckpointArg,
    /// threshold, anneal_alpha, d_max or w_max
    #[arg(long)]
    pub axis: String,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    #[command(flatten)]
    pub prompts: PromptArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[arg(long, default_value_t = 1.0)]
    pub t_ar: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct ModelEvalArgs {
    pub layers: usize,
    pub d_max: usize,
    pub w: usize,
    pub accept_rate: f64,
    #[arg(long, default_value_t = 1.0)]
    pub t_ar: f64,
}

#[derive(Args, Debug, Serialize)]
pub struct McArgs {
    pub accept_rate: f64,
    pub w: usize,
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Serialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub traces: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub t_ar: f64,
    #[arg(long)]
    pub paper_faithful_bonus: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct SpeedupDistArgs {
    #[arg(long)]
    pub traces: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub buckets: usize,
    #[arg(long, default_value_t = 1.0)]
    pub t_ar: f64,
    #[arg(long)]
    pub paper_faithful_bonus: bool,
    /// CSV of bucket ranges, counts and percentages
    #[arg(long)]
    pub out: Option<PathBuf>,
}
