//! Annealed confidence threshold.
//!
//! Intermediate-layer logits are divided by a layer-dependent temperature
//! `T_l = 1 + alpha * (1 - l / L)` before the top-1 softmax probability is
//! compared against a fixed threshold. Shallow layers run hot, which flattens
//! spuriously peaked predictions; the last layer runs at `T_L = 1`, so its
//! decision is a plain threshold on the unscaled softmax. Temperature never
//! changes which token is on top, only how confident it looks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::{argmax, check_finite};

/// Exit criterion parameters.
///
/// `threshold` is the exit confidence (written tau or gamma in the literature).
/// `anneal_alpha` is the annealing strength; it is unrelated to the per-token
/// acceptance rate used by the analytic speedup model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActConfig {
    pub anneal_alpha: f64,
    pub threshold: f64,
    pub num_layers: usize,
}

impl ActConfig {
    pub fn new(anneal_alpha: f64, threshold: f64, num_layers: usize) -> Result<Self> {
        let cfg = Self { anneal_alpha, threshold, num_layers };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.anneal_alpha.is_finite() && self.anneal_alpha >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "anneal_alpha must be >= 0, got {}",
                self.anneal_alpha
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if self.num_layers == 0 {
            return Err(Error::InvalidConfig("num_layers must be positive".into()));
        }
        Ok(())
    }

    pub fn temperature(&self, layer: usize) -> Result<f64> {
        anneal_temperature(layer, self.num_layers, self.anneal_alpha)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitDecision {
    pub exited: bool,
    pub token_id: u32,
    pub confidence: f64,
    pub layer: usize,
    pub temperature: f64,
}

/// `1 + alpha * (1 - layer / num_layers)` for `1 <= layer <= num_layers`.
pub fn anneal_temperature(layer: usize, num_layers: usize, alpha: f64) -> Result<f64> {
    if layer == 0 || layer > num_layers {
        return Err(Error::LayerOutOfRange { layer, max: num_layers });
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::InvalidConfig(format!("anneal_alpha must be >= 0, got {alpha}")));
    }
    Ok(1.0 + alpha * (1.0 - layer as f64 / num_layers as f64))
}

/// Top-1 token and its probability under `softmax(logits / temperature)`.
pub fn top1_confidence(logits: &[f64], temperature: f64) -> Result<(u32, f64)> {
    if logits.is_empty() {
        return Err(Error::DimensionMismatch { expected: 1, got: 0 });
    }
    check_finite(logits)?;
    if !(temperature.is_finite() && temperature >= 1.0) {
        return Err(Error::InvalidConfig(format!("temperature must be >= 1, got {temperature}")));
    }
    let top = argmax(logits);
    let max = logits[top];
    // The top term contributes exp(0) = 1, so p = 1 / sum.
    let sum: f64 = logits.iter().map(|&z| ((z - max) / temperature).exp()).sum();
    Ok((top as u32, 1.0 / sum))
}

pub fn should_exit(logits: &[f64], layer: usize, cfg: &ActConfig) -> Result<ExitDecision> {
    let temperature = cfg.temperature(layer)?;
    let (token_id, confidence) = top1_confidence(logits, temperature)?;
    Ok(ExitDecision {
        exited: confidence >= cfg.threshold,
        token_id,
        confidence,
        layer,
        temperature,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn final_layer_runs_at_unit_temperature() {
        for &(l, a) in &[(12usize, 0.2), (32, 5.0), (2, 0.0), (7, 1e6)] {
            assert_eq!(anneal_temperature(l, l, a).unwrap(), 1.0);
        }
    }

    #[test]
    fn no_annealing_means_unit_temperature() {
        for l in 1..=12 {
            assert_eq!(anneal_temperature(l, 12, 0.0).unwrap(), 1.0);
        }
    }

    #[test]
    fn midpoint_temperature() {
        let t = anneal_temperature(16, 32, 0.2).unwrap();
        assert!((t - 1.1).abs() < 1e-15);
    }

    #[test]
    fn layer_bounds_checked() {
        assert!(anneal_temperature(0, 12, 0.2).is_err());
        assert!(anneal_temperature(13, 12, 0.2).is_err());
    }

    #[test]
    fn uniform_logits_pick_token_zero() {
        let (tok, p) = top1_confidence(&[0.25; 8], 1.0).unwrap();
        assert_eq!(tok, 0);
        assert!((p - 1.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn two_logit_closed_forms() {
        let z = [3f64.ln(), 0.0];
        let (tok, p) = top1_confidence(&z, 1.0).unwrap();
        assert_eq!(tok, 0);
        assert!((p - 0.75).abs() < 1e-15);
        let (tok2, p2) = top1_confidence(&z, 2.0).unwrap();
        assert_eq!(tok2, 0);
        let r = 3f64.sqrt();
        assert!((p2 - r / (r + 1.0)).abs() < 1e-15);
        assert!((p2 - 0.634).abs() < 1e-3);
    }

    #[test]
    fn non_finite_logits_error() {
        assert!(top1_confidence(&[1.0, f64::INFINITY], 1.0).is_err());
        assert!(top1_confidence(&[1.0, 0.0], 0.5).is_err());
    }

    #[test]
    fn threshold_comparison() {
        let cfg = ActConfig::new(0.0, 0.55, 12).unwrap();
        // p = 0.9 for two logits with ratio 9.
        let d = should_exit(&[9f64.ln(), 0.0], 3, &cfg).unwrap();
        assert!((d.confidence - 0.9).abs() < 1e-12);
        assert!(d.exited);
    }

    #[test]
    fn annealing_only_suppresses() {
        // T=1 confidence 0.5 < tau; any T >= 1 keeps it below.
        let cfg = ActConfig::new(0.8, 0.55, 12).unwrap();
        let d = should_exit(&[0.0, 0.0], 1, &cfg).unwrap();
        assert!(!d.exited);
        assert!(d.temperature > 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(ActConfig::new(-0.1, 0.5, 12).is_err());
        assert!(ActConfig::new(0.1, 1.0, 12).is_err());
        assert!(ActConfig::new(0.1, 0.0, 12).is_err());
    }

    proptest! {
        #[test]
        fn confidence_nonincreasing_in_temperature(
            z in prop::collection::vec(-20.0f64..20.0, 2..40),
            t1 in 1.0f64..4.0,
            dt in 0.0f64..4.0,
        ) {
            let (a, p1) = top1_confidence(&z, t1).unwrap();
            let (b, p2) = top1_confidence(&z, t1 + dt).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!(p2 <= p1);
        }

        #[test]
        fn stronger_annealing_never_exits_more(
            z in prop::collection::vec(-10.0f64..10.0, 2..40),
            layer in 1usize..12,
            a1 in 0.0f64..2.0,
            da in 0.0f64..2.0,
            tau in 0.01f64..0.99,
        ) {
            let lo = should_exit(&z, layer, &ActConfig::new(a1, tau, 12).unwrap()).unwrap();
            let hi = should_exit(&z, layer, &ActConfig::new(a1 + da, tau, 12).unwrap()).unwrap();
            prop_assert!(!hi.exited || lo.exited);
        }
    }
}
