//! Token selection: greedy argmax, temperature and nucleus distributions, and
//! seeded categorical sampling.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the next token is chosen from final-layer logits.
///
/// Serialized as `greedy`, `temperature:<t>` or `top_p:<p>:<t>`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DecodeStrategy {
    #[default]
    Greedy,
    Temperature(f64),
    TopP { p: f64, temperature: f64 },
}

impl DecodeStrategy {
    pub fn is_greedy(&self) -> bool {
        matches!(self, DecodeStrategy::Greedy)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DecodeStrategy::Greedy => Ok(()),
            DecodeStrategy::Temperature(t) => check_temperature(t),
            DecodeStrategy::TopP { p, temperature } => {
                if !(p > 0.0 && p <= 1.0) {
                    return Err(Error::InvalidConfig(format!("top_p must be in (0, 1], got {p}")));
                }
                check_temperature(temperature)
            }
        }
    }

    /// Sampling distribution over the vocabulary. Greedy yields a one-hot vector.
    pub fn distribution(&self, logits: &[f64]) -> Result<Vec<f64>> {
        check_finite(logits)?;
        match *self {
            DecodeStrategy::Greedy => {
                let mut d = vec![0.0; logits.len()];
                d[argmax(logits)] = 1.0;
                Ok(d)
            }
            DecodeStrategy::Temperature(t) => Ok(softmax_scaled(logits, t)),
            DecodeStrategy::TopP { p, temperature } => {
                Ok(nucleus(softmax_scaled(logits, temperature), p))
            }
        }
    }

    /// Picks a token: argmax for greedy, a draw from [`Self::distribution`] otherwise.
    pub fn select<R: Rng + ?Sized>(&self, logits: &[f64], rng: &mut R) -> Result<u32> {
        match self {
            DecodeStrategy::Greedy => {
                check_finite(logits)?;
                Ok(argmax(logits) as u32)
            }
            _ => {
                let d = self.distribution(logits)?;
                Ok(sample_index(&d, rng) as u32)
            }
        }
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t.is_finite() && t > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("temperature must be positive, got {t}")))
    }
}

impl fmt::Display for DecodeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeStrategy::Greedy => write!(f, "greedy"),
            DecodeStrategy::Temperature(t) => write!(f, "temperature:{t}"),
            DecodeStrategy::TopP { p, temperature } => write!(f, "top_p:{p}:{temperature}"),
        }
    }
}

impl FromStr for DecodeStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| Error::InvalidConfig(format!("bad number {v:?} in strategy {s:?}")))
        };
        let strategy = match parts.as_slice() {
            ["greedy"] => DecodeStrategy::Greedy,
            ["temperature", t] => DecodeStrategy::Temperature(num(t)?),
            ["top_p", p] => DecodeStrategy::TopP { p: num(p)?, temperature: 1.0 },
            ["top_p", p, t] => DecodeStrategy::TopP { p: num(p)?, temperature: num(t)? },
            _ => return Err(Error::InvalidConfig(format!("unknown strategy {s:?}"))),
        };
        strategy.validate()?;
        Ok(strategy)
    }
}

impl TryFrom<String> for DecodeStrategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DecodeStrategy> for String {
    fn from(s: DecodeStrategy) -> String {
        s.to_string()
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn check_finite(logits: &[f64]) -> Result<()> {
    if logits.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteLogits)
    }
}

/// `softmax(logits / t)` with max subtraction.
pub fn softmax_scaled(logits: &[f64], t: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| ((z - max) / t).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    softmax_scaled(logits, 1.0)
}

/// Keeps the smallest high-probability set whose mass reaches `p`, renormalized.
/// Equal probabilities are ranked by lower token id.
fn nucleus(probs: Vec<f64>, p: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut keep = vec![false; probs.len()];
    let mut mass = 0.0;
    for &i in &order {
        keep[i] = true;
        mass += probs[i];
        if mass >= p {
            break;
        }
    }
    probs
        .iter()
        .zip(&keep)
        .map(|(&q, &k)| if k { q / mass } else { 0.0 })
        .collect()
}

/// Inverse-CDF draw from a normalized distribution. Falls back to the last
/// index with nonzero mass when rounding leaves `u` past the cumulative sum.
pub fn sample_index<R: Rng + ?Sized>(dist: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Total-variation distance between two distributions on the same support.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn argmax_prefers_lowest_id_on_ties() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn strategy_round_trips_through_strings() {
        for s in ["greedy", "temperature:0.3", "top_p:0.9:1"] {
            let parsed: DecodeStrategy = s.parse().unwrap();
            let again: DecodeStrategy = parsed.to_string().parse().unwrap();
            assert_eq!(parsed, again);
        }
        assert!("temperature:0".parse::<DecodeStrategy>().is_err());
        assert!("beam:4".parse::<DecodeStrategy>().is_err());
    }

    #[test]
    fn nucleus_keeps_head_of_distribution() {
        let d = DecodeStrategy::TopP { p: 0.7, temperature: 1.0 }
            .distribution(&[(0.6f64).ln(), (0.3f64).ln(), (0.1f64).ln()])
            .unwrap();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((d[1] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(d[2], 0.0);
    }

    #[test]
    fn sampling_matches_distribution() {
        let d = [0.5, 0.25, 0.0, 0.25];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0usize; 4];
        for _ in 0..40_000 {
            counts[sample_index(&d, &mut rng)] += 1;
        }
        assert_eq!(counts[2], 0);
        let emp: Vec<f64> = counts.iter().map(|&c| c as f64 / 40_000.0).collect();
        assert!(total_variation(&emp, &d) < 0.01);
    }

    #[test]
    fn non_finite_logits_rejected() {
        assert!(DecodeStrategy::Greedy.distribution(&[0.0, f64::NAN]).is_err());
    }
}
