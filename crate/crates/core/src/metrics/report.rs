use std::path::Path;

use ndarray::{s, ArrayView3};
use plotters::prelude::*;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{categorical_scores, count_pooled, nan_mean, ssim, tile_max, ContingencyCounts};
use crate::error::{Error, Result};
use crate::model::NowcastModel;
use crate::nn::Tensor;
use crate::radar_data::{to_raw, DatasetSpec, RadarSequence, SEVIR_THRESHOLDS};

/// Anything that maps `[B, t_in, H, W]` normalized frames to `[B, t_out, H, W]`.
pub trait Forecaster: Sync {
    fn horizons(&self) -> (usize, usize);
    fn predict(&self, inputs: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Forecaster for NowcastModel<f32> {
    fn horizons(&self) -> (usize, usize) {
        (self.config().t_in, self.config().t_out)
    }

    fn predict(&self, inputs: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.forward(inputs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub pools: Vec<usize>,
    /// Threshold for the per-lead-time CSI/POD/FAR series (unpooled).
    pub lead_time_threshold: f64,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: SEVIR_THRESHOLDS.to_vec(),
            pools: vec![1, 4, 16],
            lead_time_threshold: 219.0,
            batch_size: 8,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::config("eval.thresholds", "threshold list is empty"));
        }
        if self.pools.is_empty() || self.pools.contains(&0) {
            return Err(Error::config("eval.pools", "pools must be a nonempty list of positive sizes"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("eval.batch_size", "must be at least 1"));
        }
        Ok(())
    }

    /// Copy whose thresholds and lead-time threshold follow `spec`.
    pub fn for_spec(&self, spec: &DatasetSpec) -> Self {
        Self {
            thresholds: spec.thresholds.clone(),
            lead_time_threshold: spec.top_threshold(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScores {
    pub threshold: f64,
    pub pool: usize,
    pub csi: Option<f64>,
    pub pod: Option<f64>,
    pub far: Option<f64>,
    pub hss: Option<f64>,
    pub counts: ContingencyCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolMean {
    pub pool: usize,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadTimeSeries {
    pub threshold: f64,
    pub minutes: Vec<u32>,
    pub csi: Vec<Option<f64>>,
    pub pod: Vec<Option<f64>>,
    pub far: Vec<Option<f64>>,
}

/// Dataset-level scores. Undefined values serialize as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sample_count: usize,
    pub thresholds: Vec<f64>,
    pub pools: Vec<usize>,
    pub scores: Vec<ThresholdScores>,
    pub csi_m: Vec<PoolMean>,
    pub hss: Option<f64>,
    pub ssim: Option<f64>,
    pub crps: Option<f64>,
    pub lead_time: LeadTimeSeries,
}

fn finite(v: f64) -> Option<f64> {
    (!v.is_nan()).then_some(v)
}

fn or_nan(v: Option<f64>) -> f64 {
    v.unwrap_or(f64::NAN)
}

impl MetricReport {
    pub fn scores_at(&self, threshold: f64, pool: usize) -> Option<&ThresholdScores> {
        self.scores.iter().find(|s| s.threshold == threshold && s.pool == pool)
    }

    /// CSI at one cell, NaN when undefined or not evaluated.
    pub fn csi(&self, threshold: f64, pool: usize) -> f64 {
        or_nan(self.scores_at(threshold, pool).and_then(|s| s.csi))
    }

    pub fn csi_m(&self, pool: usize) -> f64 {
        or_nan(self.csi_m.iter().find(|m| m.pool == pool).and_then(|m| m.value))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::model::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Streaming accumulator: counts are summed before any ratio is taken.
#[derive(Debug, Clone)]
pub struct Evaluator {
    cfg: EvalConfig,
    t_out: usize,
    interval_minutes: u32,
    counts: Vec<ContingencyCounts>,
    lead: Vec<ContingencyCounts>,
    ssim_sum: f64,
    ssim_frames: usize,
    abs_sum: f64,
    abs_cells: usize,
    samples: usize,
}

impl Evaluator {
    pub fn new(cfg: &EvalConfig, t_out: usize, interval_minutes: u32) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            t_out,
            interval_minutes,
            counts: vec![ContingencyCounts::default(); cfg.thresholds.len() * cfg.pools.len()],
            lead: vec![ContingencyCounts::default(); t_out],
            ssim_sum: 0.0,
            ssim_frames: 0,
            abs_sum: 0.0,
            abs_cells: 0,
            samples: 0,
        })
    }

    /// Adds one forecast: `pred` normalized, `gt` raw, both `[t_out, H, W]`.
    pub fn add(&mut self, pred: ArrayView3<f32>, gt: ArrayView3<u8>) -> Result<()> {
        if pred.shape() != gt.shape() || gt.dim().0 != self.t_out {
            return Err(Error::shape(
                "evaluate",
                format!("[{}, H, W] pair", self.t_out),
                format!("{:?} vs {:?}", pred.shape(), gt.shape()),
            ));
        }
        let pred_raw = pred.mapv(to_raw);
        let gt_norm = gt.mapv(|v| f32::from(v) / 255.0);
        for (pi, &pool) in self.cfg.pools.iter().enumerate() {
            let (p, g) = (tile_max(pred_raw.view(), pool)?, tile_max(gt, pool)?);
            for (ti, &th) in self.cfg.thresholds.iter().enumerate() {
                self.counts[ti * self.cfg.pools.len() + pi] += count_pooled(&p, &g, th);
            }
        }
        let th = self.cfg.lead_time_threshold;
        for t in 0..self.t_out {
            let (p, g) = (pred_raw.slice(s![t, .., ..]), gt.slice(s![t, .., ..]));
            self.lead[t] += count_pooled(p.as_slice().expect("contiguous"), &g.iter().copied().collect::<Vec<_>>(), th);
            self.ssim_sum += ssim(pred.slice(s![t, .., ..]), gt_norm.slice(s![t, .., ..]))?;
        }
        self.ssim_frames += self.t_out;
        self.abs_sum += pred.iter().zip(gt_norm.iter()).map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs()).sum::<f64>();
        self.abs_cells += pred.len();
        self.samples += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &Evaluator) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += *b;
        }
        for (a, b) in self.lead.iter_mut().zip(&other.lead) {
            *a += *b;
        }
        self.ssim_sum += other.ssim_sum;
        self.ssim_frames += other.ssim_frames;
        self.abs_sum += other.abs_sum;
        self.abs_cells += other.abs_cells;
        self.samples += other.samples;
    }

    pub fn finish(&self) -> MetricReport {
        let cfg = &self.cfg;
        let mut scores = Vec::new();
        for (ti, &threshold) in cfg.thresholds.iter().enumerate() {
            for (pi, &pool) in cfg.pools.iter().enumerate() {
                let counts = self.counts[ti * cfg.pools.len() + pi];
                let s = categorical_scores(&counts);
                scores.push(ThresholdScores {
                    threshold,
                    pool,
                    csi: finite(s.csi),
                    pod: finite(s.pod),
                    far: finite(s.far),
                    hss: finite(s.hss),
                    counts,
                });
            }
        }
        let csi_m = cfg
            .pools
            .iter()
            .map(|&pool| PoolMean {
                pool,
                value: finite(nan_mean(
                    scores.iter().filter(|s| s.pool == pool).map(|s| or_nan(s.csi)),
                    "csi_m",
                )),
            })
            .collect();
        // HSS from unpooled tables, averaged over thresholds; falls back to the
        // finest evaluated pool when 1 is not configured.
        let finest = *cfg.pools.iter().min().expect("validated nonempty");
        let hss = finite(nan_mean(scores.iter().filter(|s| s.pool == finest).map(|s| or_nan(s.hss)), "hss"));
        let lead = self.lead.iter().map(categorical_scores).collect::<Vec<_>>();
        MetricReport {
            sample_count: self.samples,
            thresholds: cfg.thresholds.clone(),
            pools: cfg.pools.clone(),
            scores,
            csi_m,
            hss,
            ssim: (self.ssim_frames > 0).then(|| self.ssim_sum / self.ssim_frames as f64),
            crps: (self.abs_cells > 0).then(|| self.abs_sum / self.abs_cells as f64),
            lead_time: LeadTimeSeries {
                threshold: cfg.lead_time_threshold,
                minutes: (1..=self.t_out as u32).map(|i| i * self.interval_minutes).collect(),
                csi: lead.iter().map(|s| finite(s.csi)).collect(),
                pod: lead.iter().map(|s| finite(s.pod)).collect(),
                far: lead.iter().map(|s| finite(s.far)).collect(),
            },
        }
    }
}

/// Scores precomputed forecasts: `pred` normalized, `gt` raw.
pub fn evaluate_pairs(
    pairs: &[(ArrayView3<f32>, ArrayView3<u8>)],
    cfg: &EvalConfig,
    interval_minutes: u32,
) -> Result<MetricReport> {
    let t_out = pairs.first().map_or(1, |(_, g)| g.dim().0);
    let mut ev = Evaluator::new(cfg, t_out, interval_minutes)?;
    for (p, g) in pairs {
        ev.add(p.view(), g.view())?;
    }
    Ok(ev.finish())
}

/// Forecasts the first `t_out` frames after each sequence's first `t_in` frames
/// and scores them against the ground truth.
pub fn evaluate_dataset<F: Forecaster + ?Sized>(
    model: &F,
    dataset: &[RadarSequence],
    spec: &DatasetSpec,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    if dataset.is_empty() {
        return Err(Error::Validation {
            id: "<dataset>".into(),
            reason: "evaluation dataset is empty".into(),
        });
    }
    let (t_in, t_out) = model.horizons();
    for seq in dataset {
        if seq.len() < t_in + t_out {
            return Err(Error::Validation {
                id: seq.id.clone(),
                reason: format!("{} frames, need {}", seq.len(), t_in + t_out),
            });
        }
        if (seq.height(), seq.width()) != (spec.height, spec.width) {
            return Err(Error::Validation {
                id: seq.id.clone(),
                reason: format!("grid {}x{}, expected {}x{}", seq.height(), seq.width(), spec.height, spec.width),
            });
        }
    }
    let (h, w) = (spec.height, spec.width);
    let partials = dataset
        .par_chunks(cfg.batch_size.max(1))
        .map(|chunk| -> Result<Evaluator> {
            let mut x = Vec::with_capacity(chunk.len() * t_in * h * w);
            for seq in chunk {
                x.extend(seq.frames.slice(s![..t_in, .., ..]).iter().map(|&v| f32::from(v) / 255.0));
            }
            let y = model.predict(&Tensor::from_vec([chunk.len(), t_in, h, w], x))?;
            if y.shape() != [chunk.len(), t_out, h, w] {
                return Err(Error::shape("evaluate_dataset", format!("[{}, {t_out}, {h}, {w}]", chunk.len()), format!("{:?}", y.shape())));
            }
            let mut ev = Evaluator::new(cfg, t_out, spec.interval_minutes)?;
            for (n, seq) in chunk.iter().enumerate() {
                let pred = ArrayView3::from_shape((t_out, h, w), y.item(n)).expect("shape checked");
                ev.add(pred, seq.frames.slice(s![t_in..t_in + t_out, .., ..]))?;
            }
            Ok(ev)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = Evaluator::new(cfg, t_out, spec.interval_minutes)?;
    for p in &partials {
        total.merge(p);
    }
    Ok(total.finish())
}

/// Writes per-lead-time CSI/POD/FAR curves as an SVG image.
pub fn plot_lead_time(series: &LeadTimeSeries, path: &Path) -> Result<()> {
    let plot_err = |e: String| Error::Format(format!("plot {}: {e}", path.display()));
    let x_max = series.minutes.last().copied().unwrap_or(1).max(1);
    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("Scores by lead time, threshold {}", series.threshold), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(0u32..x_max, 0f64..1f64)
        .map_err(|e| plot_err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("lead time (min)")
        .y_desc("score")
        .draw()
        .map_err(|e| plot_err(e.to_string()))?;
    for (name, values, color) in [("CSI", &series.csi, BLUE), ("POD", &series.pod, GREEN), ("FAR", &series.far, RED)] {
        let points: Vec<(u32, f64)> =
            series.minutes.iter().zip(values.iter()).filter_map(|(&m, v)| v.map(|v| (m, v))).collect();
        chart
            .draw_series(LineSeries::new(points, color.stroke_width(2)))
            .map_err(|e| plot_err(e.to_string()))?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(e.to_string()))?;
    root.present().map_err(|e| plot_err(e.to_string()))?;
    Ok(())
}
