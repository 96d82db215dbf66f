//! Short-to-long horizon distillation.
//!
//! A teacher trained on the short horizon is rolled out autoregressively to
//! extend every training sequence by `t_long` synthetic frames. The student
//! then trains on the full long horizon with windows whose start is drawn at
//! random, so targets range from pure ground truth (start 0) to pure teacher
//! output (start `t_long`).

use std::path::Path;

use ndarray::{concatenate, s, Array3, ArrayView3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::metrics::Forecaster;
use crate::model::{ModelConfig, NowcastModel};
use crate::nn::Tensor;
use crate::radar_data::{load_dataset_dir, to_raw, write_dataset_with, DatasetSpec, RadarSequence};
use crate::trainer::{train, RunDir, TrainConfig, TrainData, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Uniform,
    /// Always start at this index (clamped to the valid range).
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub t_in: usize,
    pub t_short: usize,
    pub t_long: usize,
    pub rollout_steps: usize,
    pub sampling: Sampling,
    /// Sequences per teacher call during augmentation.
    pub batch_size: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            t_in: 13,
            t_short: 6,
            t_long: 12,
            rollout_steps: 2,
            sampling: Sampling::Uniform,
            batch_size: 8,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_in == 0 || self.t_short == 0 || self.t_long == 0 {
            return Err(Error::config("distill", "t_in, t_short and t_long must be positive"));
        }
        if self.t_short > self.t_long {
            return Err(Error::config("distill.t_short", "must not exceed t_long"));
        }
        if self.rollout_steps * self.t_short < self.t_long {
            return Err(Error::config(
                "distill.rollout_steps",
                format!("{} steps of {} frames cannot cover {}", self.rollout_steps, self.t_short, self.t_long),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("distill.batch_size", "must be at least 1"));
        }
        Ok(())
    }

    /// Ground-truth frames per training sequence.
    pub fn source_len(&self) -> usize {
        self.t_in + self.t_long
    }

    pub fn augmented_len(&self) -> usize {
        self.t_in + 2 * self.t_long
    }
}

/// A sequence whose frames from `boundary` on were produced by the teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSequence {
    pub source_id: String,
    /// Normalized `[t_in + 2 * t_long, H, W]`.
    pub frames: Array3<f32>,
    pub boundary: usize,
}

impl AugmentedSequence {
    /// Raw-unit view. Exact, since synthetic frames are stored on the raw grid.
    pub fn to_radar_sequence(&self, interval_minutes: u32) -> RadarSequence {
        RadarSequence::new(self.source_id.clone(), self.frames.mapv(to_raw), interval_minutes)
    }

    pub fn synthetic(&self) -> ArrayView3<'_, f32> {
        self.frames.slice(s![self.boundary.., .., ..])
    }
}

fn quantize(v: f32) -> f32 {
    f32::from(to_raw(v)) / 255.0
}

/// Extends each sequence by `n_frames` teacher predictions, feeding the last
/// `t_in` frames of the growing sequence back in. All sequences share one
/// teacher call per step.
pub fn rollout_batch<F: Forecaster + ?Sized>(teacher: &F, seqs: &[ArrayView3<f32>], n_frames: usize) -> Result<Vec<Array3<f32>>> {
    let (t_in, t_out) = teacher.horizons();
    let Some(first) = seqs.first() else {
        return Ok(Vec::new());
    };
    let (_, h, w) = first.dim();
    for sq in seqs {
        if sq.dim().0 < t_in || sq.dim().1 != h || sq.dim().2 != w {
            return Err(Error::shape("rollout", format!("[>= {t_in}, {h}, {w}]"), format!("{:?}", sq.shape())));
        }
    }
    let mut grown: Vec<Array3<f32>> = seqs.iter().map(|v| v.to_owned()).collect();
    let mut produced = 0;
    while produced < n_frames {
        let mut x = Vec::with_capacity(seqs.len() * t_in * h * w);
        for g in &grown {
            let len = g.dim().0;
            x.extend(g.slice(s![len - t_in.., .., ..]).iter().copied());
        }
        let y = teacher.predict(&Tensor::from_vec([seqs.len(), t_in, h, w], x))?;
        if y.shape() != [seqs.len(), t_out, h, w] {
            return Err(Error::shape("rollout", format!("[{}, {t_out}, {h}, {w}]", seqs.len()), format!("{:?}", y.shape())));
        }
        for (n, g) in grown.iter_mut().enumerate() {
            let step = ArrayView3::from_shape((t_out, h, w), y.item(n)).expect("teacher output layout");
            *g = concatenate(Axis(0), &[g.view(), step]).expect("matching frame shape");
        }
        produced += t_out;
    }
    Ok(grown
        .into_iter()
        .zip(seqs)
        .map(|(g, src)| {
            let start = src.dim().0;
            g.slice(s![start..start + n_frames, .., ..]).to_owned()
        })
        .collect())
}

/// Single-sequence form of [`rollout_batch`].
pub fn rollout<F: Forecaster + ?Sized>(teacher: &F, seq_frames: ArrayView3<f32>, n_frames: usize) -> Result<Array3<f32>> {
    Ok(rollout_batch(teacher, &[seq_frames], n_frames)?.remove(0))
}

/// Crops every sequence to `t_in + t_long` frames and appends `t_long` teacher
/// frames, quantized to the raw intensity grid so they persist losslessly.
pub fn augment_dataset<F: Forecaster + ?Sized>(
    teacher: &F,
    dataset: &[RadarSequence],
    cfg: &DistillConfig,
) -> Result<Vec<AugmentedSequence>> {
    cfg.validate()?;
    if teacher.horizons() != (cfg.t_in, cfg.t_short) {
        return Err(Error::config(
            "distill.t_short",
            format!("teacher maps {:?} frames, config expects ({}, {})", teacher.horizons(), cfg.t_in, cfg.t_short),
        ));
    }
    let keep = cfg.source_len();
    for seq in dataset {
        if seq.len() < keep {
            return Err(Error::Validation {
                id: seq.id.clone(),
                reason: format!("{} frames, augmentation needs {keep}", seq.len()),
            });
        }
    }
    let chunks: Vec<Vec<AugmentedSequence>> = dataset
        .par_chunks(cfg.batch_size)
        .map(|chunk| -> Result<Vec<AugmentedSequence>> {
            let originals: Vec<Array3<f32>> = chunk
                .iter()
                .map(|seq| seq.frames.slice(s![..keep, .., ..]).mapv(|v| f32::from(v) / 255.0))
                .collect();
            let views: Vec<ArrayView3<f32>> = originals.iter().map(|o| o.view()).collect();
            let tails = rollout_batch(teacher, &views, cfg.t_long)?;
            Ok(chunk
                .iter()
                .zip(originals.iter().zip(tails))
                .map(|(seq, (orig, tail))| AugmentedSequence {
                    source_id: seq.id.clone(),
                    frames: concatenate(Axis(0), &[orig.view(), tail.mapv(quantize).view()]).expect("frame shapes agree"),
                    boundary: keep,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Persists augmented sequences in the dataset format with the boundary and
/// the teacher checkpoint hash recorded in the manifest.
pub fn write_augmented(augmented: &[AugmentedSequence], path: &Path, teacher_hash: &str, interval_minutes: u32) -> Result<()> {
    let boundary = augmented.first().map(|a| a.boundary);
    if augmented.iter().any(|a| Some(a.boundary) != boundary) {
        return Err(Error::Format("augmented sequences disagree on the boundary".into()));
    }
    let seqs: Vec<RadarSequence> = augmented.iter().map(|a| a.to_radar_sequence(interval_minutes)).collect();
    write_dataset_with(&seqs, path, boundary, Some(teacher_hash.to_string()))
}

/// Loads an augmented dataset and the teacher hash recorded with it.
pub fn load_augmented(path: &Path, spec: &DatasetSpec) -> Result<(Vec<AugmentedSequence>, Option<String>)> {
    let dir = load_dataset_dir(path, spec)?;
    let boundary = match dir.manifest.boundary {
        Some(b) => b,
        None if dir.sequences.is_empty() => 0,
        None => return Err(Error::Format(format!("{}: manifest has no boundary; not an augmented dataset", path.display()))),
    };
    let seqs = dir
        .sequences
        .into_iter()
        .map(|s| AugmentedSequence {
            frames: s.frames.mapv(|v| f32::from(v) / 255.0),
            source_id: s.id,
            boundary,
        })
        .collect();
    Ok((seqs, dir.manifest.teacher_checkpoint_hash))
}

/// Start index of a `t_in + t_out` window, uniform over every valid start.
pub fn uniform_start(len: usize, t_in: usize, t_out: usize, rng: &mut ChaCha8Rng) -> Result<usize> {
    if len < t_in + t_out {
        return Err(Error::shape("sample_subsequence", format!("at least {} frames", t_in + t_out), len.to_string()));
    }
    Ok(rng.random_range(0..=len - t_in - t_out))
}

/// Draws a window and splits it into inputs and targets.
pub fn sample_subsequence<T: Clone>(
    frames: ArrayView3<T>,
    t_in: usize,
    t_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Array3<T>, Array3<T>, usize)> {
    let r = uniform_start(frames.dim().0, t_in, t_out, rng)?;
    Ok((
        frames.slice(s![r..r + t_in, .., ..]).to_owned(),
        frames.slice(s![r + t_in..r + t_in + t_out, .., ..]).to_owned(),
        r,
    ))
}

fn sampler(sampling: Sampling, t_in: usize, t_out: usize) -> impl Fn(usize, &mut ChaCha8Rng) -> Result<usize> + Sync {
    move |len, rng| match sampling {
        Sampling::Uniform => uniform_start(len, t_in, t_out, rng),
        Sampling::Fixed(r) => {
            uniform_start(len, t_in, t_out, rng)?;
            Ok(r.min(len - t_in - t_out))
        }
    }
}

/// Shared inputs of the three training stages.
pub struct StageSettings<'a> {
    pub model: &'a ModelConfig,
    pub distill: &'a DistillConfig,
    pub loss: &'a LossConfig,
    pub train: &'a TrainConfig,
    pub thresholds: &'a [f64],
}

fn crop(seqs: &[RadarSequence], len: usize) -> Result<Vec<RadarSequence>> {
    seqs.iter()
        .map(|s| {
            if s.len() < len {
                Err(Error::Validation {
                    id: s.id.clone(),
                    reason: format!("{} frames, need {len}", s.len()),
                })
            } else {
                Ok(s.truncated(len))
            }
        })
        .collect()
}

fn stage_model(st: &StageSettings, horizon: usize) -> Result<NowcastModel<f32>> {
    st.distill.validate()?;
    if st.model.t_in != st.distill.t_in {
        return Err(Error::config("model.t_in", format!("{} differs from distill.t_in {}", st.model.t_in, st.distill.t_in)));
    }
    NowcastModel::new(st.model.with_horizon(horizon))
}

/// Trains the short-horizon teacher on windows inside the ground-truth span.
pub fn train_short(train_set: &[RadarSequence], val: &[RadarSequence], st: &StageSettings, run: Option<&RunDir>) -> Result<TrainOutcome> {
    let model = stage_model(st, st.distill.t_short)?;
    let len = st.distill.source_len();
    let (tr, va) = (crop(train_set, len)?, crop(val, len)?);
    let sample = sampler(st.distill.sampling, st.distill.t_in, st.distill.t_short);
    train(model, &TrainData { train: &tr, val: &va }, &sample, st.loss, st.thresholds, st.train, run)
}

/// Trains the long-horizon student on augmented sequences; validation uses
/// ground truth only.
pub fn train_long(
    augmented: &[AugmentedSequence],
    val: &[RadarSequence],
    st: &StageSettings,
    run: Option<&RunDir>,
) -> Result<TrainOutcome> {
    let model = stage_model(st, st.distill.t_long)?;
    let want = st.distill.augmented_len();
    if let Some(a) = augmented.iter().find(|a| a.frames.dim().0 != want) {
        return Err(Error::Validation {
            id: a.source_id.clone(),
            reason: format!("{} frames, augmented sequences have {want}", a.frames.dim().0),
        });
    }
    let interval = val.first().map_or(5, |v| v.interval_minutes);
    let tr: Vec<RadarSequence> = augmented.iter().map(|a| a.to_radar_sequence(interval)).collect();
    let va = crop(val, st.distill.source_len())?;
    let sample = sampler(st.distill.sampling, st.distill.t_in, st.distill.t_long);
    train(model, &TrainData { train: &tr, val: &va }, &sample, st.loss, st.thresholds, st.train, run)
}

/// The no-distillation reference: the long-horizon model trained directly on
/// ground-truth sequences.
pub fn train_baseline(train_set: &[RadarSequence], val: &[RadarSequence], st: &StageSettings, run: Option<&RunDir>) -> Result<TrainOutcome> {
    let model = stage_model(st, st.distill.t_long)?;
    let len = st.distill.source_len();
    let (tr, va) = (crop(train_set, len)?, crop(val, len)?);
    let sample = sampler(st.distill.sampling, st.distill.t_in, st.distill.t_long);
    train(model, &TrainData { train: &tr, val: &va }, &sample, st.loss, st.thresholds, st.train, run)
}
