//! Bounded early-exit speculation with cached hidden states.
//!
//! A round drafts tokens autoregressively from shallow exits. Drafting stops
//! when an attempt reaches `d_max` without exiting, when `w_max` drafts have
//! accumulated, or when the token budget runs out. The in-flight positions
//! are then aligned to a common layer and verified together through the
//! remaining layers, so every committed token has passed through the full
//! stack.

mod cache;
mod scan;
mod session;
mod trace;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exit::ActConfig;
use crate::model::{baseline_decode, BaselineOutput, ToyModel};
use crate::sampling::DecodeStrategy;

pub use cache::HiddenStateCache;
pub use scan::{layer_scan, LayerScan, ScanCell};
pub use session::{DraftOutcome, Session};
pub use trace::{read_jsonl, write_jsonl, DraftToken, RoundTrace, TraceRecord, Trigger, TRACE_SCHEMA};

/// Alignment target for rounds ended by the depth bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthAlign {
    /// Align everything to `d_max`.
    #[default]
    DepthBound,
    /// Align to the deepest exit among the drafts; the unexited position is
    /// picked up by the verification pass once it reaches that layer.
    DeepestExit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub act: ActConfig,
    pub d_max: usize,
    pub w_max: usize,
    pub strategy: DecodeStrategy,
    /// Leave bonus tokens out of replayed cost accounting. Decoding always
    /// commits them.
    pub paper_faithful_bonus: bool,
    pub max_new_tokens: usize,
    pub rng_seed: u64,
    pub depth_align: DepthAlign,
    /// Test fixture: verification reads the penultimate layer.
    #[doc(hidden)]
    pub verifier_fault: bool,
}

impl EngineConfig {
    /// Defaults for a model of `num_layers` layers.
    pub fn for_layers(num_layers: usize) -> Self {
        Self::from_file(&EngineConfigFile::default(), num_layers)
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        self.act.validate()?;
        if self.act.num_layers != num_layers {
            return Err(Error::InvalidConfig(format!(
                "exit rule configured for {} layers, model has {num_layers}",
                self.act.num_layers
            )));
        }
        if self.d_max == 0 || self.d_max >= num_layers {
            return Err(Error::InvalidConfig(format!("d_max must be in 1..={}, got {}", num_layers - 1, self.d_max)));
        }
        if self.w_max == 0 {
            return Err(Error::InvalidConfig("w_max must be at least 1".into()));
        }
        self.strategy.validate()
    }

    /// Unvalidated config from its on-disk form.
    pub fn from_file(f: &EngineConfigFile, num_layers: usize) -> Self {
        Self {
            act: ActConfig { anneal_alpha: f.anneal_alpha, threshold: f.threshold, num_layers },
            d_max: f.d_max,
            w_max: f.w_max,
            strategy: f.strategy,
            paper_faithful_bonus: f.paper_faithful_bonus,
            max_new_tokens: f.max_new_tokens,
            rng_seed: f.seed,
            depth_align: f.depth_align,
            verifier_fault: false,
        }
    }

    /// Parses a flat TOML document; absent keys take their defaults.
    pub fn from_toml_str(text: &str, num_layers: usize) -> Result<Self> {
        let f = EngineConfigFile::from_toml_str(text)?;
        let cfg = Self::from_file(&f, num_layers);
        cfg.validate(num_layers)?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&EngineConfigFile::from(self)).expect("flat config serializes")
    }
}

/// On-disk form of [`EngineConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfigFile {
    pub threshold: f64,
    pub anneal_alpha: f64,
    pub d_max: usize,
    pub w_max: usize,
    pub strategy: DecodeStrategy,
    pub seed: u64,
    pub max_new_tokens: usize,
    pub paper_faithful_bonus: bool,
    pub depth_align: DepthAlign,
}

impl Default for EngineConfigFile {
    fn default() -> Self {
        Self {
            threshold: 0.55,
            anneal_alpha: 0.2,
            d_max: 10,
            w_max: 8,
            strategy: DecodeStrategy::Greedy,
            seed: 0,
            max_new_tokens: 64,
            paper_faithful_bonus: false,
            depth_align: DepthAlign::DepthBound,
        }
    }
}

impl EngineConfigFile {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }
}

impl From<&EngineConfig> for EngineConfigFile {
    fn from(c: &EngineConfig) -> Self {
        Self {
            threshold: c.act.threshold,
            anneal_alpha: c.act.anneal_alpha,
            d_max: c.d_max,
            w_max: c.w_max,
            strategy: c.strategy,
            seed: c.rng_seed,
            max_new_tokens: c.max_new_tokens,
            paper_faithful_bonus: c.paper_faithful_bonus,
            depth_align: c.depth_align,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub tokens: Vec<u32>,
    pub traces: Vec<RoundTrace>,
    /// Wall-clock microseconds per round.
    pub round_micros: Vec<u64>,
    pub hit_eos: bool,
    /// Stopped at the context limit before `max_new_tokens`.
    pub truncated: bool,
}

impl DecodeOutput {
    pub fn accepted_drafts(&self) -> usize {
        self.traces.iter().map(|t| t.accepted_count).sum()
    }

    pub fn total_drafts(&self) -> usize {
        self.traces.iter().map(|t| t.drafts.len()).sum()
    }
}

/// Runs rounds on a started session until it finishes.
pub fn run_session(mut session: Session<'_>) -> Result<DecodeOutput> {
    let mut traces = Vec::new();
    let mut round_micros = Vec::new();
    while !session.is_finished() {
        let t0 = Instant::now();
        traces.push(session.run_round()?);
        round_micros.push(t0.elapsed().as_micros() as u64);
    }
    Ok(DecodeOutput {
        tokens: session.generated().to_vec(),
        traces,
        round_micros,
        hit_eos: session.hit_eos(),
        truncated: session.truncated(),
    })
}

/// Decodes up to `cfg.max_new_tokens` tokens after `prompt`.
pub fn decode(model: &ToyModel, prompt: &[u32], cfg: &EngineConfig) -> Result<DecodeOutput> {
    run_session(Session::start(model, prompt, cfg)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptComparison {
    pub prompt_index: usize,
    /// First output index where engine and baseline differ, if any.
    pub first_divergence: Option<usize>,
    pub engine_len: usize,
    pub baseline_len: usize,
    pub rounds: usize,
    pub accepted_drafts: usize,
    pub total_drafts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub mismatches: usize,
    pub prompts: Vec<PromptComparison>,
}

impl EquivalenceReport {
    pub fn is_lossless(&self) -> bool {
        self.mismatches == 0
    }

    /// Accepted drafts per round across all prompts.
    pub fn compression_rate(&self) -> f64 {
        let rounds: usize = self.prompts.iter().map(|p| p.rounds).sum();
        let accepted: usize = self.prompts.iter().map(|p| p.accepted_drafts).sum();
        if rounds == 0 {
            0.0
        } else {
            accepted as f64 / rounds as f64
        }
    }
}

fn first_divergence(a: &[u32], b: &[u32]) -> Option<usize> {
    match a.iter().zip(b).position(|(x, y)| x != y) {
        Some(i) => Some(i),
        None if a.len() != b.len() => Some(a.len().min(b.len())),
        None => None,
    }
}

/// Compares engine output against precomputed baseline outputs.
pub fn compare_with_baselines(
    model: &ToyModel,
    prompts: &[Vec<u32>],
    baselines: &[BaselineOutput],
    cfg: &EngineConfig,
) -> Result<EquivalenceReport> {
    if !cfg.strategy.is_greedy() {
        return Err(Error::InvalidConfig("equivalence is defined for greedy decoding".into()));
    }
    if prompts.len() != baselines.len() {
        return Err(Error::DimensionMismatch { expected: prompts.len(), got: baselines.len() });
    }
    let mut report = EquivalenceReport { mismatches: 0, prompts: Vec::with_capacity(prompts.len()) };
    for (i, (prompt, base)) in prompts.iter().zip(baselines).enumerate() {
        let out = decode(model, prompt, cfg)?;
        let div = first_divergence(&out.tokens, &base.tokens);
        if div.is_some() {
            report.mismatches += 1;
        }
        report.prompts.push(PromptComparison {
            prompt_index: i,
            first_divergence: div,
            engine_len: out.tokens.len(),
            baseline_len: base.tokens.len(),
            rounds: out.traces.len(),
            accepted_drafts: out.accepted_drafts(),
            total_drafts: out.total_drafts(),
        });
    }
    Ok(report)
}

/// Decodes every prompt with the engine and with full-depth greedy decoding
/// and reports token-level differences.
pub fn assert_equivalence(model: &ToyModel, prompts: &[Vec<u32>], cfg: &EngineConfig) -> Result<EquivalenceReport> {
    let baselines = prompts
        .iter()
        .map(|p| baseline_decode(model, p, cfg.max_new_tokens, DecodeStrategy::Greedy, cfg.rng_seed))
        .collect::<Result<Vec<_>>>()?;
    compare_with_baselines(model, prompts, &baselines, cfg)
}

#[cfg(test)]
mod tests;
