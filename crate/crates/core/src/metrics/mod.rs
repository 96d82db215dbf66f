//! Forecast verification scores.
//!
//! Events are cells whose raw intensity is `>= threshold`. Pooled scores
//! max-pool the binary event grids over non-overlapping `k x k` tiles before
//! counting. Ratios with a zero denominator are reported as NaN and are left
//! out of any mean that includes them.

mod report;
mod ssim;

use std::ops::{Add, AddAssign};

use ndarray::{Array2, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use report::{
    evaluate_dataset, evaluate_pairs, plot_lead_time, EvalConfig, Evaluator, Forecaster, LeadTimeSeries, MetricReport,
    PoolMean, ThresholdScores,
};
pub use ssim::{ssim, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};

/// Binary event counts for one (threshold, pool) cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyCounts {
    pub hits: u64,
    pub misses: u64,
    pub false_alarms: u64,
    pub correct_negatives: u64,
}

impl ContingencyCounts {
    pub fn total(&self) -> u64 {
        self.hits + self.misses + self.false_alarms + self.correct_negatives
    }

    fn record(&mut self, predicted: bool, observed: bool) {
        match (predicted, observed) {
            (true, true) => self.hits += 1,
            (false, true) => self.misses += 1,
            (true, false) => self.false_alarms += 1,
            (false, false) => self.correct_negatives += 1,
        }
    }
}

impl AddAssign for ContingencyCounts {
    fn add_assign(&mut self, o: Self) {
        self.hits += o.hits;
        self.misses += o.misses;
        self.false_alarms += o.false_alarms;
        self.correct_negatives += o.correct_negatives;
    }
}

impl Add for ContingencyCounts {
    type Output = Self;
    fn add(mut self, o: Self) -> Self {
        self += o;
        self
    }
}

/// Scores derived from a contingency table. Undefined ratios are NaN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CategoricalScores {
    pub csi: f64,
    pub pod: f64,
    pub far: f64,
    pub hss: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        f64::NAN
    } else {
        num / den
    }
}

pub fn categorical_scores(c: &ContingencyCounts) -> CategoricalScores {
    let (tp, fn_, fp, tn) = (c.hits as f64, c.misses as f64, c.false_alarms as f64, c.correct_negatives as f64);
    CategoricalScores {
        csi: ratio(tp, tp + fn_ + fp),
        pod: ratio(tp, tp + fn_),
        far: ratio(fp, tp + fp),
        hss: ratio(2.0 * (tp * tn - fn_ * fp), (tp + fn_) * (fn_ + tn) + (tp + fp) * (fp + tn)),
    }
}

/// Mean of the finite entries, NaN when none are finite.
pub(crate) fn nan_mean(values: impl IntoIterator<Item = f64>, what: &str) -> f64 {
    let (mut sum, mut n, mut skipped) = (0.0, 0usize, 0usize);
    for v in values {
        if v.is_nan() {
            skipped += 1;
        } else {
            sum += v;
            n += 1;
        }
    }
    if skipped > 0 {
        log::info!("{what}: {skipped} undefined value(s) excluded from the mean");
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

pub fn binarize(field: ArrayView2<u8>, threshold: f64) -> Array2<bool> {
    field.mapv(|v| f64::from(v) >= threshold)
}

pub fn max_pool(grid: ArrayView2<bool>, k: usize) -> Result<Array2<bool>> {
    let (h, w) = grid.dim();
    check_pool(h, w, k)?;
    Ok(Array2::from_shape_fn((h / k, w / k), |(i, j)| {
        grid.slice(ndarray::s![i * k..(i + 1) * k, j * k..(j + 1) * k]).iter().any(|&b| b)
    }))
}

fn check_pool(h: usize, w: usize, k: usize) -> Result<()> {
    if k == 0 || !h.is_multiple_of(k) || !w.is_multiple_of(k) {
        return Err(Error::shape("max_pool", format!("H and W divisible by {k}"), format!("{h}x{w}")));
    }
    Ok(())
}

/// Per-tile maxima of each frame. Thresholding tile maxima is the same as
/// max-pooling the thresholded grid, and lets one pass serve every threshold.
pub(crate) fn tile_max(frames: ArrayView3<u8>, k: usize) -> Result<Vec<u8>> {
    let (t, h, w) = frames.dim();
    check_pool(h, w, k)?;
    let (ph, pw) = (h / k, w / k);
    let mut out = vec![0u8; t * ph * pw];
    for (f, frame) in frames.outer_iter().enumerate() {
        let dst = &mut out[f * ph * pw..(f + 1) * ph * pw];
        for (i, row) in frame.outer_iter().enumerate() {
            let drow = &mut dst[(i / k) * pw..(i / k + 1) * pw];
            for (j, &v) in row.iter().enumerate() {
                let d = &mut drow[j / k];
                if v > *d {
                    *d = v;
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn count_pooled(pred: &[u8], gt: &[u8], threshold: f64) -> ContingencyCounts {
    let mut c = ContingencyCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        c.record(f64::from(p) >= threshold, f64::from(g) >= threshold);
    }
    c
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{b:?}"), format!("{a:?}")));
    }
    Ok(())
}

/// Counts over every lead time and (pooled) cell. `pool == 1` means no pooling.
pub fn contingency(pred: ArrayView3<u8>, gt: ArrayView3<u8>, threshold: f64, pool: usize) -> Result<ContingencyCounts> {
    check_same("contingency", pred.shape(), gt.shape())?;
    Ok(count_pooled(&tile_max(pred, pool)?, &tile_max(gt, pool)?, threshold))
}

/// Mean CSI over `thresholds`, skipping undefined entries.
pub fn csi_mean(pred: ArrayView3<u8>, gt: ArrayView3<u8>, thresholds: &[f64], pool: usize) -> Result<f64> {
    if thresholds.is_empty() {
        return Err(Error::config("thresholds", "threshold list is empty"));
    }
    check_same("csi_mean", pred.shape(), gt.shape())?;
    let (p, g) = (tile_max(pred, pool)?, tile_max(gt, pool)?);
    Ok(nan_mean(
        thresholds.iter().map(|&th| categorical_scores(&count_pooled(&p, &g, th)).csi),
        "csi_mean",
    ))
}

/// Deterministic CRPS, i.e. the mean absolute error.
pub fn crps_deterministic(pred: &[f32], gt: &[f32]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("crps_deterministic", gt.len().to_string(), pred.len().to_string()));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred.iter().zip(gt).map(|(&p, &g)| (f64::from(p) - f64::from(g)).abs()).sum();
    Ok(sum / pred.len() as f64)
}
