//! Radar sequence datasets: in-memory representation, the on-disk format,
//! normalisation, splitting and a seeded synthetic storm generator.

mod format;
mod sevir;
mod synthetic;

use ndarray::{Array3, ArrayView3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use format::{load_dataset, load_dataset_dir, write_dataset, write_dataset_with, DatasetDir, Manifest, ManifestEntry, MANIFEST_FILE};
pub use sevir::load_sevir_npy;
pub use synthetic::{generate_synthetic, SyntheticGenConfig};

/// Thresholds used for categorical verification on SEVIR-style VIL data.
pub const SEVIR_THRESHOLDS: [f64; 6] = [16.0, 74.0, 133.0, 160.0, 181.0, 219.0];

/// One sample: `[T_total, H, W]` raw intensities in `0..=255`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RadarSequence {
    pub id: String,
    pub frames: Array3<u8>,
    pub interval_minutes: u32,
}

impl RadarSequence {
    pub fn new(id: impl Into<String>, frames: Array3<u8>, interval_minutes: u32) -> Self {
        Self {
            id: id.into(),
            frames,
            interval_minutes,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    /// Checks the sequence against a dataset spec.
    pub fn validate(&self, spec: &DatasetSpec) -> Result<()> {
        let fail = |reason: String| Error::Validation {
            id: self.id.clone(),
            reason,
        };
        if self.height() != spec.height || self.width() != spec.width {
            return Err(fail(format!(
                "grid {}x{} does not match dataset {}x{}",
                self.height(),
                self.width(),
                spec.height,
                spec.width
            )));
        }
        if self.len() < spec.t_in + spec.t_out {
            return Err(fail(format!(
                "{} frames, need at least {} + {}",
                self.len(),
                spec.t_in,
                spec.t_out
            )));
        }
        if self.interval_minutes == 0 {
            return Err(fail("interval_minutes must be positive".into()));
        }
        Ok(())
    }

    /// Keeps only the first `len` frames.
    pub fn truncated(&self, len: usize) -> RadarSequence {
        let len = len.min(self.len());
        RadarSequence {
            id: self.id.clone(),
            frames: self.frames.slice(ndarray::s![..len, .., ..]).to_owned(),
            interval_minutes: self.interval_minutes,
        }
    }
}

/// Geometry and verification settings shared by every sequence of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub height: usize,
    pub width: usize,
    /// Number of observed input frames.
    pub t_in: usize,
    /// Prediction horizon.
    pub t_out: usize,
    /// Strictly increasing raw-unit thresholds for CSI.
    pub thresholds: Vec<f64>,
    /// Raw-unit threshold above which the loss up-weights pixels.
    pub tau: f64,
    pub interval_minutes: u32,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            t_in: 13,
            t_out: 12,
            thresholds: SEVIR_THRESHOLDS.to_vec(),
            tau: 219.0,
            interval_minutes: 5,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("data.height/width", "grid dimensions must be positive"));
        }
        if self.t_in == 0 {
            return Err(Error::config("data.t_in", "must be at least 1"));
        }
        if self.t_out == 0 {
            return Err(Error::config("data.t_out", "must be at least 1"));
        }
        if self.thresholds.is_empty() {
            return Err(Error::config("data.thresholds", "must not be empty"));
        }
        if self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("data.thresholds", "must be strictly increasing"));
        }
        if !(0.0..=255.0).contains(&self.tau) {
            return Err(Error::config("data.tau", "must lie in [0, 255]"));
        }
        if self.interval_minutes == 0 {
            return Err(Error::config("data.interval_minutes", "must be positive"));
        }
        Ok(())
    }

    pub fn top_threshold(&self) -> f64 {
        *self.thresholds.last().expect("validated non-empty")
    }

    pub fn sequence_len(&self) -> usize {
        self.t_in + self.t_out
    }
}

/// Raw `0..=255` intensities to `[0, 1]` by a fixed division.
pub fn normalize(seq: &RadarSequence) -> Array3<f32> {
    normalize_frames(seq.frames.view())
}

pub fn normalize_frames(frames: ArrayView3<u8>) -> Array3<f32> {
    frames.mapv(|v| v as f32 / 255.0)
}

/// Inverse of [`normalize`], rounding to the nearest integer and clipping.
pub fn denormalize(frames: ArrayView3<f32>) -> Array3<u8> {
    frames.mapv(to_raw)
}

pub fn to_raw(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub train: Vec<RadarSequence>,
    pub val: Vec<RadarSequence>,
    pub test: Vec<RadarSequence>,
}

/// Seeded partition into train/val/test.
///
/// Validation and test sizes are `floor(n * fraction)`; the remainder goes to
/// training. Each part keeps the input order.
pub fn split(dataset: Vec<RadarSequence>, fractions: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(Error::config("split.fractions", "fractions must be nonnegative"));
    }
    if (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(Error::config(
            "split.fractions",
            format!("fractions sum to {}, expected 1", ft + fv + fs),
        ));
    }
    let n = dataset.len();
    let n_val = ((n as f64) * fv + 1e-9).floor() as usize;
    let n_test = ((n as f64) * fs + 1e-9).floor() as usize;
    let n_val = n_val.min(n);
    let n_test = n_test.min(n - n_val);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut role = vec![0u8; n];
    for &i in &order[..n_val] {
        role[i] = 1;
    }
    for &i in &order[n_val..n_val + n_test] {
        role[i] = 2;
    }
    let mut out = Split::default();
    for (seq, r) in dataset.into_iter().zip(role) {
        match r {
            1 => out.val.push(seq),
            2 => out.test.push(seq),
            _ => out.train.push(seq),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use ndarray::Array3;
    use proptest::prelude::*;

    use super::*;

    fn dummy(n: usize) -> Vec<RadarSequence> {
        (0..n)
            .map(|i| RadarSequence::new(format!("s{i}"), Array3::from_elem((2, 1, 1), i as u8), 5))
            .collect()
    }

    #[test]
    fn normalize_known_values() {
        let seq = RadarSequence::new("x", Array3::from_shape_vec((1, 1, 3), vec![255, 0, 219]).unwrap(), 5);
        let n = normalize(&seq);
        assert_eq!(n[[0, 0, 0]], 1.0);
        assert_eq!(n[[0, 0, 1]], 0.0);
        assert!((n[[0, 0, 2]] - 0.8588).abs() < 1e-4);
    }

    #[test]
    fn denormalize_inverts_normalize_on_all_levels() {
        let seq = RadarSequence::new("x", Array3::from_shape_fn((1, 16, 16), |(_, i, j)| (i * 16 + j) as u8), 5);
        let n = normalize(&seq);
        assert_eq!(denormalize(n.view()), seq.frames);
        let flat: Vec<f32> = n.iter().copied().collect();
        assert!(flat.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn split_sizes_floor_then_remainder_to_train() {
        let s = split(dummy(10), (0.8, 0.1, 0.1), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        let s = split(dummy(10), (1.0, 0.0, 0.0), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (10, 0, 0));
        let s = split(dummy(7), (0.5, 0.25, 0.25), 1).unwrap();
        // floor(7 * 0.25) = 1 for val and test
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (5, 1, 1));
    }

    #[test]
    fn split_is_deterministic() {
        let a = split(dummy(20), (0.6, 0.2, 0.2), 42).unwrap();
        let b = split(dummy(20), (0.6, 0.2, 0.2), 42).unwrap();
        assert_eq!(a, b);
        let c = split(dummy(20), (0.6, 0.2, 0.2), 43).unwrap();
        assert_ne!(a.val, c.val);
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let err = split(dummy(4), (0.5, 0.2, 0.2), 0).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "split.fractions"));
        assert!(split(dummy(4), (1.2, -0.1, -0.1), 0).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(DatasetSpec::default().validate().is_ok());
        let mut s = DatasetSpec::default();
        s.thresholds = vec![16.0, 16.0];
        assert!(s.validate().is_err());
        let mut s = DatasetSpec::default();
        s.t_in = 0;
        assert!(s.validate().is_err());
    }

    proptest! {
        #[test]
        fn split_partitions(n in 0usize..60, a in 0.0f64..1.0, b in 0.0f64..1.0, seed in any::<u64>()) {
            let fv = a * 0.5;
            let fs = b * (1.0 - fv) * 0.5;
            let ft = 1.0 - fv - fs;
            let s = split(dummy(n), (ft, fv, fs), seed).unwrap();
            prop_assert_eq!(s.train.len() + s.val.len() + s.test.len(), n);
            let ids: HashSet<_> = s.train.iter().chain(&s.val).chain(&s.test).map(|q| q.id.clone()).collect();
            prop_assert_eq!(ids.len(), n);
        }
    }
}
