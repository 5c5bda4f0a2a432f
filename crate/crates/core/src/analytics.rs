//! Wall-time model of bounded speculation and the empirical counterpart
//! computed by replaying engine traces through a layer-cost model.
//!
//! A round drafts `w` tokens at up to `d_max` layers each, then verifies
//! them together through the remaining `L - d_max` layers:
//!
//! ```text
//! T_round = (w * d_max + L - d_max) / L * T_AR
//! E[N]    = a (1 - a^w) / (1 - a)
//! SD      = E[N] * T_AR / T_round
//! ```
//!
//! `a` is the per-token acceptance rate under a geometric acceptance model.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{decode, EngineConfig, RoundTrace};
use crate::error::{Error, Result};
use crate::model::ToyModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedupParams {
    pub num_layers: usize,
    pub d_max: usize,
    pub w: usize,
    pub accept_rate: f64,
    /// Seconds per full-depth token.
    pub t_ar: f64,
}

impl SpeedupParams {
    pub fn validate(&self) -> Result<()> {
        if self.d_max == 0 || self.d_max >= self.num_layers {
            return Err(Error::InvalidConfig(format!(
                "d_max must be in 1..{}, got {}",
                self.num_layers, self.d_max
            )));
        }
        if self.w == 0 {
            return Err(Error::InvalidConfig("w must be at least 1".into()));
        }
        check_rate(self.accept_rate)?;
        if !(self.t_ar.is_finite() && self.t_ar > 0.0) {
            return Err(Error::InvalidConfig(format!("t_ar must be positive, got {}", self.t_ar)));
        }
        Ok(())
    }
}

fn check_rate(a: f64) -> Result<()> {
    if (0.0..=1.0).contains(&a) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("acceptance rate must be in [0, 1], got {a}")))
    }
}

/// Time for one round of `w` drafts.
pub fn round_time(p: &SpeedupParams) -> Result<f64> {
    p.validate()?;
    let l = p.num_layers as f64;
    let d = p.d_max as f64;
    Ok((p.w as f64 * d + l - d) / l * p.t_ar)
}

/// Expected accepted drafts per round; `w` at `a = 1`.
pub fn expected_accepted(a: f64, w: usize) -> Result<f64> {
    check_rate(a)?;
    if a == 1.0 {
        return Ok(w as f64);
    }
    Ok(a * (1.0 - a.powi(w as i32)) / (1.0 - a))
}

/// Speedup over full-depth decoding.
pub fn speedup(p: &SpeedupParams) -> Result<f64> {
    p.validate()?;
    let l = p.num_layers as f64;
    let d = p.d_max as f64;
    let w = p.w as f64;
    let a = p.accept_rate;
    let sd = if a == 1.0 {
        l * w / (w * d + l - d)
    } else {
        l * a * (1.0 - a.powi(p.w as i32)) / ((1.0 - a) * (w * d + l - d))
    };
    debug_assert!((sd - expected_accepted(a, p.w)? / round_time(p)? * p.t_ar).abs() <= 1e-9 * sd.max(1.0));
    Ok(sd)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
}

/// Simulates rounds whose drafts are accepted independently with probability
/// `a` until the first rejection or `w` acceptances.
pub fn monte_carlo_accepted(a: f64, w: usize, trials: usize, seed: u64) -> Result<McEstimate> {
    check_rate(a)?;
    if trials == 0 {
        return Err(Error::InvalidConfig("trials must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..trials {
        let mut k = 0;
        while k < w && rng.gen::<f64>() < a {
            k += 1;
        }
        let k = k as f64;
        sum += k;
        sum_sq += k * k;
    }
    let n = trials as f64;
    let mean = sum / n;
    let var = if trials > 1 { ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
    Ok(McEstimate { mean, std_error: (var / n).sqrt() })
}

/// How alignment work is charged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentCost {
    /// One layer unit per layer crossed, however many positions lag.
    #[default]
    Parallel,
    /// Free, matching the closed-form round time.
    Strict,
}

/// Idealized cost of a round: sequential drafting layer by layer, then
/// alignment and verification passes that cost one layer unit per layer
/// regardless of how many positions they cover.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub num_layers: usize,
    pub t_ar: f64,
    /// Count the token read off the verification pass as output.
    pub include_bonus: bool,
    pub alignment: AlignmentCost,
}

impl CostModel {
    pub fn new(num_layers: usize, t_ar: f64) -> Self {
        Self { num_layers, t_ar, include_bonus: true, alignment: AlignmentCost::Parallel }
    }

    /// Cost model matching an engine configuration's bonus accounting.
    pub fn for_config(cfg: &EngineConfig, t_ar: f64) -> Self {
        Self { include_bonus: !cfg.paper_faithful_bonus, ..Self::new(cfg.act.num_layers, t_ar) }
    }

    pub fn layer_unit_cost(&self) -> f64 {
        self.t_ar / self.num_layers as f64
    }

    /// Layer units charged for one round.
    pub fn round_units(&self, t: &RoundTrace) -> Result<usize> {
        if t.align_target_layer + t.verify_layers != self.num_layers {
            return Err(Error::Trace(format!(
                "round verified {} layers past layer {}, cost model has {} layers",
                t.verify_layers, t.align_target_layer, self.num_layers
            )));
        }
        let align = match self.alignment {
            AlignmentCost::Parallel => t.align_layers,
            AlignmentCost::Strict => 0,
        };
        Ok(t.layer_units_draft + align + t.verify_layers)
    }

    /// Output tokens credited to a round.
    pub fn credited(&self, t: &RoundTrace) -> usize {
        if self.include_bonus {
            t.committed.len()
        } else {
            t.accepted_count
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReplayResult {
    pub seconds: f64,
    pub ar_seconds: f64,
    pub rounds: usize,
    pub credited_tokens: usize,
    pub accepted_drafts: usize,
    pub total_drafts: usize,
    /// Accepted drafts per round.
    pub compression_rate: f64,
    pub speedup: f64,
}

impl ReplayResult {
    /// Fraction of drafts accepted.
    pub fn accept_rate(&self) -> f64 {
        if self.total_drafts == 0 {
            0.0
        } else {
            self.accepted_drafts as f64 / self.total_drafts as f64
        }
    }
}

pub fn replay_cost(traces: &[RoundTrace], cm: &CostModel) -> Result<ReplayResult> {
    if cm.num_layers == 0 || !(cm.t_ar.is_finite() && cm.t_ar > 0.0) {
        return Err(Error::InvalidConfig("cost model needs layers and a positive t_ar".into()));
    }
    let mut units = 0;
    let mut credited = 0;
    let mut accepted = 0;
    let mut drafts = 0;
    for t in traces {
        units += cm.round_units(t)?;
        credited += cm.credited(t);
        accepted += t.accepted_count;
        drafts += t.drafts.len();
    }
    let seconds = units as f64 * cm.layer_unit_cost();
    let ar_seconds = credited as f64 * cm.t_ar;
    let rounds = traces.len();
    Ok(ReplayResult {
        seconds,
        ar_seconds,
        rounds,
        credited_tokens: credited,
        accepted_drafts: accepted,
        total_drafts: drafts,
        compression_rate: if rounds == 0 { 0.0 } else { accepted as f64 / rounds as f64 },
        speedup: if seconds > 0.0 { ar_seconds / seconds } else { 0.0 },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Threshold,
    AnnealAlpha,
    DMax,
    WMax,
}

impl SweepAxis {
    fn name(self) -> &'static str {
        match self {
            SweepAxis::Threshold => "threshold",
            SweepAxis::AnnealAlpha => "anneal_alpha",
            SweepAxis::DMax => "d_max",
            SweepAxis::WMax => "w_max",
        }
    }

    /// Copy of `base` with this axis set to `value`.
    pub fn apply(self, base: &EngineConfig, value: f64) -> Result<EngineConfig> {
        let mut cfg = base.clone();
        let count = || {
            if value >= 0.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::InvalidConfig(format!("{} must be a whole number, got {value}", self.name())))
            }
        };
        match self {
            SweepAxis::Threshold => cfg.act.threshold = value,
            SweepAxis::AnnealAlpha => cfg.act.anneal_alpha = value,
            SweepAxis::DMax => cfg.d_max = count()?,
            SweepAxis::WMax => cfg.w_max = count()?,
        }
        cfg.validate(base.act.num_layers)?;
        Ok(cfg)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "threshold" | "tau" => Ok(SweepAxis::Threshold),
            "anneal_alpha" | "alpha" => Ok(SweepAxis::AnnealAlpha),
            "d_max" => Ok(SweepAxis::DMax),
            "w_max" => Ok(SweepAxis::WMax),
            _ => Err(Error::InvalidConfig(format!("unknown sweep axis {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub axis_value: f64,
    pub empirical_sd: f64,
    pub empirical_cr: f64,
    pub analytic_sd: f64,
    pub accept_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for p in &self.points {
            w.serialize(p)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Index of the point with the highest empirical speedup.
    pub fn best(&self) -> Option<usize> {
        (0..self.points.len()).max_by(|&i, &j| self.points[i].empirical_sd.total_cmp(&self.points[j].empirical_sd))
    }
}

/// Closed-form speedup at the acceptance rate and mean draft width observed
/// in a replay.
pub fn analytic_from_replay(r: &ReplayResult, cfg: &EngineConfig, t_ar: f64) -> Result<f64> {
    let w = if r.rounds == 0 { 1 } else { ((r.total_drafts as f64 / r.rounds as f64).round() as usize).max(1) };
    speedup(&SpeedupParams {
        num_layers: cfg.act.num_layers,
        d_max: cfg.d_max,
        w,
        accept_rate: r.accept_rate(),
        t_ar,
    })
}

/// Decodes every prompt at each value of `axis` and replays the traces.
/// Points come back in ascending axis order.
pub fn sweep(
    model: &ToyModel,
    prompts: &[Vec<u32>],
    base: &EngineConfig,
    axis: SweepAxis,
    values: &[f64],
    t_ar: f64,
) -> Result<SweepResult> {
    let mut values = values.to_vec();
    values.sort_by(f64::total_cmp);
    let mut points = Vec::with_capacity(values.len());
    for v in values {
        let cfg = axis.apply(base, v)?;
        let cm = CostModel::for_config(&cfg, t_ar);
        let mut traces = Vec::new();
        for p in prompts {
            traces.extend(decode(model, p, &cfg)?.traces);
        }
        let r = replay_cost(&traces, &cm)?;
        points.push(SweepPoint {
            axis_value: v,
            empirical_sd: r.speedup,
            empirical_cr: r.compression_rate,
            analytic_sd: analytic_from_replay(&r, &cfg, t_ar)?,
            accept_rate: r.accept_rate(),
        });
    }
    Ok(SweepResult { axis, points })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bucket {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedupHistogram {
    pub per_prompt: Vec<f64>,
    pub min: f64,
    pub max: f64,
    pub buckets: Vec<Bucket>,
    /// Prompts whose speedup is below 1.
    pub below_break_even: usize,
}

/// Buckets per-prompt speedups into `num_buckets` equal-width ranges between
/// the observed minimum and maximum.
pub fn speedup_distribution(groups: &[Vec<RoundTrace>], cm: &CostModel, num_buckets: usize) -> Result<SpeedupHistogram> {
    if groups.is_empty() {
        return Err(Error::InvalidConfig("no prompts to summarize".into()));
    }
    if num_buckets == 0 {
        return Err(Error::InvalidConfig("need at least one bucket".into()));
    }
    let per_prompt = groups.iter().map(|g| replay_cost(g, cm).map(|r| r.speedup)).collect::<Result<Vec<_>>>()?;
    let min = per_prompt.iter().copied().fold(f64::INFINITY, f64::min);
    let max = per_prompt.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n = if max > min { num_buckets } else { 1 };
    let width = (max - min) / n as f64;
    let mut counts = vec![0usize; n];
    for &s in &per_prompt {
        let i = if width > 0.0 { (((s - min) / width) as usize).min(n - 1) } else { 0 };
        counts[i] += 1;
    }
    let total = per_prompt.len() as f64;
    let buckets = counts
        .iter()
        .enumerate()
        .map(|(i, &count)| Bucket {
            lo: min + i as f64 * width,
            hi: if i + 1 == n { max } else { min + (i + 1) as f64 * width },
            count,
            percent: 100.0 * count as f64 / total,
        })
        .collect();
    Ok(SpeedupHistogram {
        below_break_even: per_prompt.iter().filter(|&&s| s < 1.0).count(),
        per_prompt,
        min,
        max,
        buckets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{DraftToken, Trigger};
    use proptest::prelude::*;

    fn params(w: usize, a: f64) -> SpeedupParams {
        SpeedupParams { num_layers: 32, d_max: 10, w, accept_rate: a, t_ar: 1.0 }
    }

    fn finite_sum(a: f64, w: usize) -> f64 {
        let mut s = 0.0;
        for k in 0..w {
            s += k as f64 * a.powi(k as i32) * (1.0 - a);
        }
        s + w as f64 * a.powi(w as i32)
    }

    #[test]
    fn round_time_examples() {
        assert_eq!(round_time(&params(8, 0.5)).unwrap(), 102.0 / 32.0);
        let one = SpeedupParams { d_max: 31, w: 1, ..params(1, 0.5) };
        assert_eq!(round_time(&one).unwrap(), 1.0);
        let grow = round_time(&params(16, 0.5)).unwrap() - round_time(&params(8, 0.5)).unwrap();
        assert!((grow - 8.0 * 10.0 / 32.0).abs() < 1e-12);
        assert!(round_time(&SpeedupParams { d_max: 32, ..params(1, 0.5) }).is_err());
        assert!(round_time(&params(0, 0.5)).is_err());
    }

    #[test]
    fn expected_accepted_examples() {
        assert_eq!(expected_accepted(0.37, 1).unwrap(), 0.37);
        assert_eq!(expected_accepted(1.0, 6).unwrap(), 6.0);
        assert!((expected_accepted(0.5, 3).unwrap() - 0.875).abs() < 1e-15);
        assert!((finite_sum(0.5, 3) - 0.875).abs() < 1e-15);
        assert!(expected_accepted(1.5, 2).is_err());
    }

    #[test]
    fn closed_form_matches_finite_sum() {
        for i in 0..=100 {
            let a = i as f64 / 100.0;
            for w in 1..=16 {
                let diff = (expected_accepted(a, w).unwrap() - finite_sum(a, w)).abs();
                assert!(diff < 1e-12, "a {a} w {w}: {diff}");
            }
        }
    }

    #[test]
    fn full_acceptance_limit() {
        let sd = speedup(&params(8, 1.0)).unwrap();
        assert!((sd - 256.0 / 102.0).abs() < 1e-12);
        let near = speedup(&params(8, 1.0 - 1e-9)).unwrap();
        assert!((near - sd).abs() < 1e-6);
    }

    #[test]
    fn monte_carlo_edges() {
        assert_eq!(monte_carlo_accepted(0.0, 5, 100, 1).unwrap().mean, 0.0);
        assert_eq!(monte_carlo_accepted(1.0, 5, 100, 1).unwrap().mean, 5.0);
        assert!(monte_carlo_accepted(0.5, 5, 0, 1).is_err());
        let e = monte_carlo_accepted(0.5, 3, 100_000, 9).unwrap();
        assert!((e.mean - 0.875).abs() < 3.0 * e.std_error);
    }

    proptest! {
        #[test]
        fn speedup_is_accepted_over_round_time(
            l in 2usize..64, d_frac in 0.0f64..1.0, w in 1usize..16, a in 0.0f64..1.0, t in 0.01f64..10.0,
        ) {
            let d_max = 1 + ((l - 1) as f64 * d_frac) as usize % (l - 1);
            let p = SpeedupParams { num_layers: l, d_max, w, accept_rate: a, t_ar: t };
            let lhs = speedup(&p).unwrap();
            let rhs = expected_accepted(a, w).unwrap() / round_time(&p).unwrap() * t;
            prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        }

        #[test]
        fn speedup_increases_with_acceptance(a in 0.001f64..0.998, da in 0.001f64..0.1, w in 1usize..12) {
            let b = (a + da).min(0.999);
            prop_assert!(speedup(&params(w, b)).unwrap() > speedup(&params(w, a)).unwrap());
        }
    }

    fn synthetic(w: usize, d_max: usize, l: usize, accepted: usize, bonus: Option<u32>) -> RoundTrace {
        let drafts = (0..w)
            .map(|i| DraftToken { position: i, token_id: 2, exit_layer: Some(d_max), confidence: 0.9, draft_distribution: None })
            .collect();
        let mut committed = vec![2; accepted];
        committed.extend(bonus);
        RoundTrace {
            drafts,
            trigger: Trigger::WidthBound,
            align_target_layer: d_max,
            accepted_count: accepted,
            bonus_token: bonus,
            committed,
            attempts: w,
            layer_units_draft: w * d_max,
            layer_units_reuse: 0,
            layer_units_align: 0,
            layer_units_verify: w * (l - d_max),
            align_layers: 0,
            verify_layers: l - d_max,
        }
    }

    #[test]
    fn replay_of_full_acceptance_matches_limit() {
        let traces = vec![synthetic(8, 10, 32, 8, None); 5];
        let cm = CostModel { include_bonus: false, ..CostModel::new(32, 0.02) };
        let r = replay_cost(&traces, &cm).unwrap();
        assert!((r.speedup - speedup(&params(8, 1.0)).unwrap()).abs() < 1e-9);
        assert_eq!(r.compression_rate, 8.0);
        assert!((r.seconds - 5.0 * round_time(&SpeedupParams { t_ar: 0.02, ..params(8, 1.0) }).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn rejected_single_draft_is_no_faster_than_autoregression() {
        let t = synthetic(1, 5, 12, 0, Some(3));
        let r = replay_cost(&[t], &CostModel::new(12, 1.0)).unwrap();
        assert_eq!(r.credited_tokens, 1);
        assert!(r.seconds >= 1.0);
        assert!(r.speedup <= 1.0);
    }

    #[test]
    fn replay_rejects_mismatched_depth() {
        let t = synthetic(2, 5, 12, 2, None);
        assert!(replay_cost(&[t], &CostModel::new(16, 1.0)).is_err());
    }

    #[test]
    fn strict_alignment_is_never_slower() {
        let mut t = synthetic(3, 6, 12, 1, Some(4));
        t.align_layers = 3;
        let par = replay_cost(&[t.clone()], &CostModel::new(12, 1.0)).unwrap();
        let strict = replay_cost(&[t], &CostModel { alignment: AlignmentCost::Strict, ..CostModel::new(12, 1.0) }).unwrap();
        assert!(strict.speedup > par.speedup);
        assert_eq!(par.seconds - strict.seconds, 3.0 / 12.0);
    }

    #[test]
    fn histogram_accounting() {
        let cm = CostModel::new(12, 1.0);
        let same = vec![vec![synthetic(2, 3, 12, 2, None)]; 4];
        let h = speedup_distribution(&same, &cm, 5).unwrap();
        assert_eq!(h.buckets.len(), 1);
        assert_eq!(h.buckets[0].count, 4);

        let groups: Vec<Vec<RoundTrace>> = (0..7).map(|k| vec![synthetic(4, 3, 12, k % 5, Some(1))]).collect();
        let h = speedup_distribution(&groups, &cm, 3).unwrap();
        assert_eq!(h.buckets.iter().map(|b| b.count).sum::<usize>(), 7);
        assert!((h.buckets.iter().map(|b| b.percent).sum::<f64>() - 100.0).abs() < 1e-9);
        assert_eq!(h.min, h.per_prompt.iter().copied().fold(f64::INFINITY, f64::min));
        assert_eq!(h.below_break_even, h.per_prompt.iter().filter(|&&s| s < 1.0).count());
    }

    #[test]
    fn axis_parsing_and_application() {
        let base = EngineConfig::for_layers(12);
        assert_eq!("d_max".parse::<SweepAxis>().unwrap(), SweepAxis::DMax);
        assert!("depth".parse::<SweepAxis>().is_err());
        assert_eq!(SweepAxis::WMax.apply(&base, 3.0).unwrap().w_max, 3);
        assert!(SweepAxis::DMax.apply(&base, 2.5).is_err());
        assert!(SweepAxis::DMax.apply(&base, 12.0).is_err());
        assert_eq!(SweepAxis::Threshold.apply(&base, 0.7).unwrap().act.threshold, 0.7);
    }
}
