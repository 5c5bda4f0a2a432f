use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use specbound::analytics::{
    expected_accepted, monte_carlo_accepted, replay_cost, round_time, speedup, speedup_distribution, AlignmentCost,
    CostModel, SpeedupParams, SweepAxis,
};
use specbound::engine::{
    compare_with_baselines, read_jsonl, write_jsonl, DepthAlign, EngineConfig, EngineConfigFile, RoundTrace,
    TraceRecord,
};
use specbound::exit::ActConfig;
use specbound::model::{
    baseline_decode, build_corpus, build_model, train_exit_heads, HeadMode, ToyModel, ToyModelSpec,
};
use specbound::prompts::{format_prompt, parse_prompts, random_prompts};
use specbound::sampling::DecodeStrategy;

use crate::args::*;
use crate::manifest::{sha256_hex, RunManifest};
use crate::Mismatch;

const VERSION: &str = env!("CARGO_PKG_VERSION");

struct Loaded {
    model: ToyModel,
    sha256: String,
}

fn load_checkpoint(path: &Path) -> Result<Loaded> {
    let bytes = std::fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let model = ToyModel::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))?;
    Ok(Loaded { model, sha256: sha256_hex(&bytes) })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn load_prompts(args: &PromptArgs, vocab: usize) -> Result<Vec<Vec<u32>>> {
    let prompts = match (&args.prompts, args.random_prompts) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            parse_prompts(&text, vocab).with_context(|| format!("in {}", path.display()))?
        }
        (None, Some(n)) => random_prompts(n, vocab, args.min_len, args.max_len, args.prompt_seed)?,
        (None, None) => bail!(specbound::Error::InvalidConfig("give --prompts or --random-prompts".into())),
    };
    if prompts.is_empty() {
        bail!(specbound::Error::InvalidConfig("no prompts".into()));
    }
    Ok(prompts)
}

fn clamp_d_max(d_max: usize, num_layers: usize) -> usize {
    let top = num_layers - 1;
    if d_max > top {
        eprintln!("warning: d_max {d_max} exceeds {top} for a {num_layers}-layer model, clamped to {top}");
        top
    } else {
        d_max
    }
}

fn engine_config(args: &EngineArgs, num_layers: usize) -> Result<EngineConfig> {
    let mut file = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            EngineConfigFile::from_toml_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => EngineConfigFile::default(),
    };
    if let Some(v) = args.threshold {
        file.threshold = v;
    }
    if let Some(v) = args.anneal_alpha {
        file.anneal_alpha = v;
    }
    if let Some(v) = args.d_max {
        file.d_max = v;
    }
    if let Some(v) = args.w_max {
        file.w_max = v;
    }
    if let Some(s) = &args.strategy {
        file.strategy = s.parse::<DecodeStrategy>()?;
    }
    if let Some(v) = args.seed {
        file.seed = v;
    }
    if let Some(v) = args.max_new_tokens {
        file.max_new_tokens = v;
    }
    file.paper_faithful_bonus |= args.paper_faithful_bonus;
    if args.align_deepest_exit {
        file.depth_align = DepthAlign::DeepestExit;
    }
    file.d_max = clamp_d_max(file.d_max, num_layers);
    let cfg = EngineConfig::from_file(&file, num_layers);
    cfg.validate(num_layers)?;
    Ok(cfg)
}

pub fn build_train(args: &BuildTrainArgs) -> Result<()> {
    let spec = ToyModelSpec {
        num_layers: args.layers,
        hidden_dim: args.hidden_dim,
        vocab_size: args.vocab,
        max_context: args.max_context,
        seed: args.seed,
    };
    spec.validate()?;
    let mut model = build_model(spec)?;
    let loss_path = loss_csv_path(&args.out);
    let mut outputs = vec![args.out.clone()];
    if args.oracle_heads {
        model = model.with_head_mode(HeadMode::Oracle);
    } else {
        let corpus = build_corpus(&model, args.sequences, args.seq_len.min(spec.max_context), args.corpus_seed)?;
        let report = train_exit_heads(&mut model, &corpus, args.steps, args.step_size)?;
        let mut w = create(&loss_path)?;
        writeln!(w, "layer,step,loss")?;
        for (i, curve) in report.loss_curves.iter().enumerate() {
            for (step, loss) in curve.iter().enumerate() {
                writeln!(w, "{},{step},{loss}", i + 1)?;
            }
        }
        w.flush()?;
        outputs.push(loss_path);
        for (i, curve) in report.loss_curves.iter().enumerate() {
            let (first, last) = (curve[0], curve[curve.len() - 1]);
            println!("layer {:>2}: loss {first:.4} -> {last:.4}", i + 1);
        }
    }
    let bytes = model.to_bytes();
    std::fs::write(&args.out, &bytes).with_context(|| format!("writing {}", args.out.display()))?;
    let sha = sha256_hex(&bytes);
    println!("wrote {} (sha256 {sha})", args.out.display());
    RunManifest {
        command: "build-train",
        config: args,
        checkpoint: Some(&args.out),
        checkpoint_sha256: Some(sha),
        seed: Some(args.seed),
        tool_version: VERSION,
        outputs,
    }
    .write_for_outputs()
}

fn loss_csv_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".loss.csv");
    PathBuf::from(name)
}

pub fn decode(args: &DecodeArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint.checkpoint)?;
    let model = &ck.model;
    let cfg = engine_config(&args.engine, model.num_layers())?;
    let prompts = load_prompts(&args.prompts, model.vocab_size())?;

    let mut records = Vec::new();
    let mut lines = Vec::with_capacity(prompts.len());
    let mut all_traces: Vec<RoundTrace> = Vec::new();
    for (i, prompt) in prompts.iter().enumerate() {
        let out = specbound::engine::decode(model, prompt, &cfg).with_context(|| format!("prompt {i}"))?;
        if out.truncated {
            eprintln!("warning: prompt {i} reached the context limit after {} tokens", out.tokens.len());
        }
        lines.push(format_prompt(&out.tokens));
        for (r, (trace, us)) in out.traces.iter().zip(&out.round_micros).enumerate() {
            records.push(TraceRecord::new(i, r, *us, trace.clone()));
        }
        all_traces.extend(out.traces);
    }

    let mut outputs = Vec::new();
    match &args.out {
        Some(path) => {
            let mut w = create(path)?;
            for l in &lines {
                writeln!(w, "{l}")?;
            }
            w.flush()?;
            outputs.push(path.clone());
        }
        None => {
            for l in &lines {
                println!("{l}");
            }
        }
    }
    if let Some(path) = &args.trace_out {
        let mut w = create(path)?;
        write_jsonl(&mut w, &records)?;
        w.flush()?;
        outputs.push(path.clone());
    }

    let r = replay_cost(&all_traces, &CostModel::for_config(&cfg, 1.0))?;
    eprintln!(
        "{} prompts, {} rounds, compression {:.3}, accept rate {:.3}, replayed speedup {:.3}",
        prompts.len(),
        r.rounds,
        r.compression_rate,
        r.accept_rate(),
        r.speedup
    );
    RunManifest {
        command: "decode",
        config: &EngineConfigFile::from(&cfg),
        checkpoint: Some(&args.checkpoint.checkpoint),
        checkpoint_sha256: Some(ck.sha256),
        seed: Some(cfg.rng_seed),
        tool_version: VERSION,
        outputs,
    }
    .write_for_outputs()
}

#[derive(Serialize)]
struct VerifyRow {
    threshold: f64,
    anneal_alpha: f64,
    d_max: usize,
    w_max: usize,
    mismatches: usize,
    compression_rate: f64,
    first_mismatch: Option<usize>,
}

pub fn verify(args: &VerifyArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint.checkpoint)?;
    let model = &ck.model;
    let l = model.num_layers();
    let prompts = load_prompts(&args.prompts, model.vocab_size())?;
    let d_values: Vec<usize> = if args.d_max_values.is_empty() {
        let mut v = vec![1, 4.min(l - 1), l - 1];
        v.dedup();
        v
    } else {
        args.d_max_values.iter().map(|&d| clamp_d_max(d, l)).collect()
    };

    let baselines = prompts
        .iter()
        .map(|p| {
            let n = args.max_new_tokens.min(model.max_context().saturating_sub(p.len()));
            baseline_decode(model, p, n, DecodeStrategy::Greedy, 0)
        })
        .collect::<specbound::Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut total = 0;
    for &tau in &args.thresholds {
        for &alpha in &args.alphas {
            for &d in &d_values {
                for &w in &args.w_max_values {
                    let mut cfg = EngineConfig::for_layers(l);
                    cfg.act = ActConfig::new(alpha, tau, l)?;
                    cfg.d_max = d;
                    cfg.w_max = w;
                    cfg.max_new_tokens = args.max_new_tokens;
                    cfg.verifier_fault = args.fault_verifier;
                    cfg.validate(l)?;
                    let rep = compare_with_baselines(model, &prompts, &baselines, &cfg)?;
                    let first = rep.prompts.iter().find(|p| p.first_divergence.is_some()).map(|p| p.prompt_index);
                    println!(
                        "tau={tau} alpha={alpha} d_max={d} w_max={w} mismatches={}/{} compression={:.3}",
                        rep.mismatches,
                        prompts.len(),
                        rep.compression_rate()
                    );
                    total += rep.mismatches;
                    rows.push(VerifyRow {
                        threshold: tau,
                        anneal_alpha: alpha,
                        d_max: d,
                        w_max: w,
                        mismatches: rep.mismatches,
                        compression_rate: rep.compression_rate(),
                        first_mismatch: first,
                    });
                }
            }
        }
    }
    if let Some(path) = &args.report {
        let w = create(path)?;
        serde_json::to_writer_pretty(w, &rows)?;
        RunManifest {
            command: "verify",
            config: args,
            checkpoint: Some(&args.checkpoint.checkpoint),
            checkpoint_sha256: Some(ck.sha256.clone()),
            seed: Some(args.prompts.prompt_seed),
            tool_version: VERSION,
            outputs: vec![path.clone()],
        }
        .write_for_outputs()?;
    }
    if total > 0 {
        return Err(Mismatch(format!("{total} prompt decodes diverged from the full-depth baseline")).into());
    }
    println!("all {} configurations lossless", rows.len());
    Ok(())
}

pub fn layer_scan(args: &LayerScanArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint.checkpoint)?;
    let model = &ck.model;
    let context = parse_prompts(&args.context, model.vocab_size())?
        .into_iter()
        .next()
        .ok_or(specbound::Error::EmptyPrompt)?;
    let act = ActConfig::new(args.anneal_alpha, args.threshold, model.num_layers())?;
    let scan = specbound::engine::layer_scan(model, &context, args.n, &act)?;
    let mut w = create(&args.out)?;
    scan.write_csv(&mut w)?;
    w.flush()?;
    println!("{} layers x {} positions -> {}", scan.num_layers, scan.num_positions(), args.out.display());
    RunManifest {
        command: "layer-scan",
        config: args,
        checkpoint: Some(&args.checkpoint.checkpoint),
        checkpoint_sha256: Some(ck.sha256),
        seed: None,
        tool_version: VERSION,
        outputs: vec![args.out.clone()],
    }
    .write_for_outputs()
}

pub fn sweep(args: &SweepArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint.checkpoint)?;
    let model = &ck.model;
    let axis: SweepAxis = args.axis.parse()?;
    let base = engine_config(&args.engine, model.num_layers())?;
    let prompts = load_prompts(&args.prompts, model.vocab_size())?;
    let result = specbound::analytics::sweep(model, &prompts, &base, axis, &args.values, args.t_ar)?;
    println!("{:>10} {:>8} {:>8} {:>8} {:>8}", axis.to_string(), "sd", "cr", "analytic", "accept");
    for p in &result.points {
        println!(
            "{:>10} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
            p.axis_value, p.empirical_sd, p.empirical_cr, p.analytic_sd, p.accept_rate
        );
    }
    if let Some(i) = result.best() {
        println!("best {axis} = {}", result.points[i].axis_value);
    }
    let mut w = create(&args.out)?;
    result.write_csv(&mut w)?;
    w.flush()?;
    RunManifest {
        command: "sweep",
        config: args,
        checkpoint: Some(&args.checkpoint.checkpoint),
        checkpoint_sha256: Some(ck.sha256),
        seed: Some(base.rng_seed),
        tool_version: VERSION,
        outputs: vec![args.out.clone()],
    }
    .write_for_outputs()
}

pub fn model_eval(args: &ModelEvalArgs) -> Result<()> {
    let p = SpeedupParams {
        num_layers: args.layers,
        d_max: args.d_max,
        w: args.w,
        accept_rate: args.accept_rate,
        t_ar: args.t_ar,
    };
    p.validate()?;
    println!("round_time {:.6}", round_time(&p)?);
    println!("expected_accepted {:.6}", expected_accepted(p.accept_rate, p.w)?);
    println!("speedup {:.4}", speedup(&p)?);
    Ok(())
}

pub fn mc(args: &McArgs) -> Result<()> {
    let est = monte_carlo_accepted(args.accept_rate, args.w, args.trials, args.seed)?;
    let exact = expected_accepted(args.accept_rate, args.w)?;
    println!("monte_carlo {:.6} +/- {:.6}", est.mean, est.std_error);
    println!("closed_form {exact:.6}");
    Ok(())
}

fn read_traces(path: &Path) -> Result<Vec<TraceRecord>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let records = read_jsonl(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))?;
    if records.is_empty() {
        bail!(specbound::Error::Trace(format!("{} has no rounds", path.display())));
    }
    Ok(records)
}

fn trace_layers(records: &[TraceRecord]) -> usize {
    let r = &records[0].round;
    r.align_target_layer + r.verify_layers
}

pub fn replay(args: &ReplayArgs) -> Result<()> {
    let records = read_traces(&args.traces)?;
    let base = CostModel { include_bonus: !args.paper_faithful_bonus, ..CostModel::new(trace_layers(&records), args.t_ar) };
    let traces: Vec<RoundTrace> = records.into_iter().map(|r| r.round).collect();
    for alignment in [AlignmentCost::Parallel, AlignmentCost::Strict] {
        let r = replay_cost(&traces, &CostModel { alignment, ..base })?;
        let name = match alignment {
            AlignmentCost::Parallel => "parallel",
            AlignmentCost::Strict => "strict",
        };
        println!(
            "{name:<8} rounds {} tokens {} seconds {:.4} ar_seconds {:.4} speedup {:.4} compression {:.4} accept_rate {:.4}",
            r.rounds,
            r.credited_tokens,
            r.seconds,
            r.ar_seconds,
            r.speedup,
            r.compression_rate,
            r.accept_rate()
        );
    }
    Ok(())
}

pub fn speedup_dist(args: &SpeedupDistArgs) -> Result<()> {
    let records = read_traces(&args.traces)?;
    let cm = CostModel { include_bonus: !args.paper_faithful_bonus, ..CostModel::new(trace_layers(&records), args.t_ar) };
    let mut by_prompt: BTreeMap<usize, Vec<RoundTrace>> = BTreeMap::new();
    for r in records {
        by_prompt.entry(r.prompt_index).or_default().push(r.round);
    }
    let ids: Vec<usize> = by_prompt.keys().copied().collect();
    let groups: Vec<Vec<RoundTrace>> = by_prompt.into_values().collect();
    let hist = speedup_distribution(&groups, &cm, args.buckets)?;
    println!("{} prompts, speedup {:.3}..{:.3}", groups.len(), hist.min, hist.max);
    for b in &hist.buckets {
        println!("[{:.3}, {:.3}) {:>5} {:>6.2}%", b.lo, b.hi, b.count, b.percent);
    }
    let slow: Vec<String> = ids
        .iter()
        .zip(&hist.per_prompt)
        .filter(|(_, &sd)| sd < 1.0)
        .map(|(id, sd)| format!("{id} ({sd:.3})"))
        .collect();
    if slow.is_empty() {
        println!("no prompt below break-even");
    } else {
        println!("{} below break-even: {}", hist.below_break_even, slow.join(", "));
    }
    if let Some(path) = &args.out {
        let mut w = create(path)?;
        writeln!(w, "lo,hi,count,percent")?;
        for b in &hist.buckets {
            writeln!(w, "{},{},{},{}", b.lo, b.hi, b.count, b.percent)?;
        }
        w.flush()?;
        RunManifest {
            command: "speedup-dist",
            config: args,
            checkpoint: None,
            checkpoint_sha256: None,
            seed: None,
            tool_version: VERSION,
            outputs: vec![path.clone()],
        }
        .write_for_outputs()?;
    }
    Ok(())
}
