//! Heavy-rain weighted mean squared error.
//!
//! Each pixel's squared error is scaled by a two-level weight that depends
//! only on the ground truth: `1` where the raw target intensity is at most
//! `tau`, and `w_max` above it. Thresholding happens in raw `0..=255` units
//! while the error itself is measured on normalised values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Mean over every element (batch, time and space).
    Mean,
    /// Plain sum over every element.
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    pub w_max: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 219.0,
            w_max: 10.0,
            reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_max >= 1.0 && self.w_max.is_finite()) {
            return Err(Error::config("loss.w_max", "must be a finite value >= 1"));
        }
        if !(0.0..=255.0).contains(&self.tau) {
            return Err(Error::config("loss.tau", "must lie in [0, 255]"));
        }
        Ok(())
    }

    #[inline]
    pub fn weight(&self, raw: u8) -> f64 {
        if f64::from(raw) <= self.tau {
            1.0
        } else {
            self.w_max
        }
    }

    fn scale(&self, n: usize) -> f64 {
        match self.reduction {
            Reduction::Mean => 1.0 / n as f64,
            Reduction::Sum => 1.0,
        }
    }
}

/// Elementwise weights for raw-unit targets.
pub fn pixel_weight(target_raw: &[u8], config: &LossConfig) -> Vec<f64> {
    target_raw.iter().map(|&v| config.weight(v)).collect()
}

fn check(pred: usize, target: usize, raw: usize) -> Result<()> {
    if pred != target || pred != raw {
        return Err(Error::shape(
            "weighted_mse",
            format!("{pred} elements in every input"),
            format!("pred {pred}, target {target}, target_raw {raw}"),
        ));
    }
    Ok(())
}

pub fn weighted_mse<S: Scalar>(pred: &[S], target: &[S], target_raw: &[u8], config: &LossConfig) -> Result<f64> {
    check(pred.len(), target.len(), target_raw.len())?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .zip(target_raw)
        .map(|((&p, &t), &r)| config.weight(r) * (p - t).as_f64().powi(2))
        .sum();
    Ok(sum * config.scale(pred.len()))
}

/// Analytic gradient `2 w (pred - target) / N` (or without `N` for sums).
pub fn weighted_mse_grad<S: Scalar>(pred: &[S], target: &[S], target_raw: &[u8], config: &LossConfig) -> Result<Vec<S>> {
    Ok(weighted_mse_with_grad(pred, target, target_raw, config)?.1)
}

pub fn weighted_mse_with_grad<S: Scalar>(
    pred: &[S],
    target: &[S],
    target_raw: &[u8],
    config: &LossConfig,
) -> Result<(f64, Vec<S>)> {
    check(pred.len(), target.len(), target_raw.len())?;
    if pred.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let scale = config.scale(pred.len());
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .zip(target_raw)
        .map(|((&p, &t), &r)| {
            let w = config.weight(r);
            let diff = (p - t).as_f64();
            loss += w * diff * diff;
            S::of(2.0 * w * diff * scale)
        })
        .collect();
    Ok((loss * scale, grad))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn cfg(w_max: f64) -> LossConfig {
        LossConfig {
            w_max,
            ..LossConfig::default()
        }
    }

    #[test]
    fn pixel_weight_levels() {
        let c = cfg(10.0);
        assert_eq!(pixel_weight(&[100, 240, 219, 220], &c), vec![1.0, 10.0, 1.0, 10.0]);
    }

    #[test]
    fn identical_inputs_give_zero_loss_and_gradient() {
        let p = [0.1f64, 0.5, 0.9];
        let raw = [25u8, 128, 230];
        assert_eq!(weighted_mse(&p, &p, &raw, &cfg(10.0)).unwrap(), 0.0);
        assert!(weighted_mse_grad(&p, &p, &raw, &cfg(10.0)).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_heavy_pixel() {
        let loss = weighted_mse(&[0.5f64], &[0.9], &[230], &cfg(10.0)).unwrap();
        assert!((loss - 1.6).abs() < 1e-12);
    }

    #[test]
    fn w_max_one_is_plain_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p: Vec<f64> = (0..200).map(|_| rng.random()).collect();
        let t: Vec<f64> = (0..200).map(|_| rng.random()).collect();
        let raw: Vec<u8> = t.iter().map(|v| (v * 255.0).round() as u8).collect();
        let mse = p.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 200.0;
        assert!((weighted_mse(&p, &t, &raw, &cfg(1.0)).unwrap() - mse).abs() < 1e-12);
    }

    #[test]
    fn scaling_w_max_scales_heavy_gradients_exactly() {
        let p = [0.2f64, 0.4];
        let t = [0.3f64, 0.95];
        let raw = [76u8, 242];
        let g1 = weighted_mse_grad(&p, &t, &raw, &cfg(2.0)).unwrap();
        let g3 = weighted_mse_grad(&p, &t, &raw, &cfg(6.0)).unwrap();
        assert_eq!(g1[0], g3[0]);
        assert_eq!(g3[1], 3.0 * g1[1]);
    }

    #[test]
    fn sum_reduction_is_mean_times_count() {
        let p = [0.2f64, 0.4, 0.7];
        let t = [0.3f64, 0.95, 0.1];
        let raw = [76u8, 242, 25];
        let mean = weighted_mse(&p, &t, &raw, &cfg(10.0)).unwrap();
        let sum = weighted_mse(
            &p,
            &t,
            &raw,
            &LossConfig {
                reduction: Reduction::Sum,
                ..cfg(10.0)
            },
        )
        .unwrap();
        assert!((sum - 3.0 * mean).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(matches!(weighted_mse(&[0.1f32, 0.2], &[0.1], &[1, 2], &cfg(10.0)), Err(Error::Shape { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(cfg(0.5).validate().is_err());
        assert!(LossConfig { tau: 300.0, ..cfg(10.0) }.validate().is_err());
        assert!(cfg(10.0).validate().is_ok());
    }

    proptest! {
        #[test]
        fn loss_strictly_increases_with_w_max(
            vals in proptest::collection::vec((0.0f64..1.0, 0u8..=255), 1..30),
            heavy in 220u8..=255,
            w in 1.0f64..20.0,
        ) {
            let mut pred: Vec<f64> = vals.iter().map(|v| v.0).collect();
            let mut raw: Vec<u8> = vals.iter().map(|v| v.1).collect();
            let mut target: Vec<f64> = raw.iter().map(|&r| r as f64 / 255.0).collect();
            pred.push(0.0);
            raw.push(heavy);
            target.push(heavy as f64 / 255.0);
            let lo = weighted_mse(&pred, &target, &raw, &cfg(w)).unwrap();
            let hi = weighted_mse(&pred, &target, &raw, &cfg(w + 0.5)).unwrap();
            prop_assert!(hi > lo);
            prop_assert!(lo >= 0.0);
        }

        #[test]
        fn weights_ignore_the_prediction(raw in proptest::collection::vec(0u8..=255, 1..20), shift in -1.0f64..1.0) {
            // gradient / (2 diff / N) recovers the weight regardless of pred
            let target: Vec<f64> = raw.iter().map(|&r| r as f64 / 255.0).collect();
            let pred: Vec<f64> = target.iter().map(|t| t + shift + 2.0).collect();
            let g = weighted_mse_grad(&pred, &target, &raw, &cfg(10.0)).unwrap();
            let n = raw.len() as f64;
            for ((gi, r), (p, t)) in g.iter().zip(&raw).zip(pred.iter().zip(&target)) {
                let w = gi * n / (2.0 * (p - t));
                prop_assert!((w - cfg(10.0).weight(*r)).abs() < 1e-9);
            }
        }
    }
}
