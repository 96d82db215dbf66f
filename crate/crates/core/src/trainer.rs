//! Optimization loop shared by teacher, student and baseline training.
//!
//! A run directory, when given, holds:
//!
//! ```text
//! state.ckpt      latest training state (weights, optimizer moments, history)
//! best.ckpt       best-by-validation model
//! history.jsonl   one JSON record per finished epoch
//! ```
//!
//! Every epoch draws its shuffling and sub-sequence starts from its own
//! seeded stream, so resuming from `state.ckpt` continues exactly where a
//! straight-through run would be.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::s;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{weighted_mse, weighted_mse_with_grad, LossConfig};
use crate::metrics::{EvalConfig, Evaluator};
use crate::model::{save_model, write_atomic, Archive, NowcastModel};
use crate::nn::Tensor;
use crate::radar_data::RadarSequence;

pub const STATE_FILE: &str = "state.ckpt";
pub const BEST_FILE: &str = "best.ckpt";
pub const HISTORY_FILE: &str = "history.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Validate every this many epochs (the last epoch is always validated).
    pub val_interval: usize,
    /// Validation rounds without improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
    /// When false the seed is mixed with OS entropy.
    pub deterministic: bool,
    pub one_cycle: bool,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            batch_size: 8,
            max_epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            val_interval: 1,
            patience: 0,
            seed: 0,
            deterministic: true,
            one_cycle: false,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |k: &str, r: &str| Err(Error::config(format!("train.{k}"), r));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return err("learning_rate", "must be a finite nonnegative number");
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("beta1", "betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return err("eps", "must be positive");
        }
        if self.val_interval == 0 {
            return err("val_interval", "must be at least 1");
        }
        if !(self.grad_clip >= 0.0) {
            return err("grad_clip", "must be nonnegative");
        }
        Ok(())
    }

    fn lr_at(&self, step: u64, total: u64) -> f64 {
        if !self.one_cycle || total == 0 {
            return self.learning_rate;
        }
        // cosine warm-up over the first 30% from lr/25, then cosine decay to lr/1e4
        let (lo, hi, end) = (self.learning_rate / 25.0, self.learning_rate, self.learning_rate / 25.0 / 1e4);
        let warm = (0.3 * total as f64).max(1.0);
        let s = step as f64;
        let cos = |from: f64, to: f64, frac: f64| to + (from - to) * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos()) / 2.0;
        if s < warm {
            cos(lo, hi, s / warm)
        } else {
            cos(hi, end, (s - warm) / (total as f64 - warm).max(1.0))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_csi_m: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn best_val_csi_m(&self) -> Option<f64> {
        self.epochs.iter().filter_map(|e| e.val_csi_m).reduce(f64::max)
    }
}

/// Adam moments and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f32], grads: &[f32], lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powf(self.step as f64);
        let c2 = 1.0 - b2.powf(self.step as f64);
        let step_size = (lr / c1) as f32;
        let (b1, b2, c2, eps) = (b1 as f32, b2 as f32, c2 as f32, cfg.eps as f32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            params[i] -= step_size * self.m[i] / ((self.v[i] / c2).sqrt() + eps);
        }
    }
}

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: NowcastModel<f32>,
    pub best: NowcastModel<f32>,
    pub optimizer: Adam,
    /// Number of completed epochs.
    pub epoch: usize,
    pub history: TrainHistory,
    pub best_score: Option<(f64, f64)>,
    pub rounds_since_best: usize,
    pub seed: u64,
    pub config: TrainConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateMeta {
    kind: String,
    epoch: usize,
    adam_step: u64,
    history: TrainHistory,
    best_score: Option<(f64, f64)>,
    rounds_since_best: usize,
    seed: u64,
    train_config: TrainConfig,
}

const STATE_KIND: &str = "training_state";

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut archive = Archive::from_model(&state.model);
    archive.push_params("best.", &state.best);
    let n = state.optimizer.m.len();
    archive.push("adam.m", vec![n], state.optimizer.m.clone());
    archive.push("adam.v", vec![n], state.optimizer.v.clone());
    archive.meta = serde_json::to_value(StateMeta {
        kind: STATE_KIND.into(),
        epoch: state.epoch,
        adam_step: state.optimizer.step,
        history: state.history.clone(),
        best_score: state.best_score,
        rounds_since_best: state.rounds_since_best,
        seed: state.seed,
        train_config: state.config.clone(),
    })
    .expect("state meta serializes");
    archive.write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let archive = Archive::read(path)?;
    let meta: StateMeta = serde_json::from_value(archive.meta.clone())
        .map_err(|e| Error::CorruptCheckpoint(format!("{}: training metadata: {e}", path.display())))?;
    if meta.kind != STATE_KIND {
        return Err(Error::CorruptCheckpoint(format!("{}: not a training state", path.display())));
    }
    let model = archive.to_model()?;
    let best = archive.params_to_model("best.")?;
    let moment = |name: &str| -> Result<Vec<f32>> {
        let a = archive
            .get(name)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing array `{name}`")))?;
        if a.data.len() != model.parameter_count() {
            return Err(Error::CorruptCheckpoint(format!("array `{name}` has wrong length")));
        }
        Ok(a.data.clone())
    };
    Ok(TrainState {
        optimizer: Adam {
            m: moment("adam.m")?,
            v: moment("adam.v")?,
            step: meta.adam_step,
        },
        model,
        best,
        epoch: meta.epoch,
        history: meta.history,
        best_score: meta.best_score,
        rounds_since_best: meta.rounds_since_best,
        seed: meta.seed,
        config: meta.train_config,
    })
}

/// Chooses the start index of a training window given the sequence length.
pub type StartSampler<'a> = dyn Fn(usize, &mut ChaCha8Rng) -> Result<usize> + Sync + 'a;

pub struct TrainData<'a> {
    pub train: &'a [RadarSequence],
    pub val: &'a [RadarSequence],
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: NowcastModel<f32>,
    pub last: NowcastModel<f32>,
    pub history: TrainHistory,
}

/// Where a run keeps its files, and whether to pick up an existing state.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
    pub resume: bool,
}

struct Batch {
    x: Tensor<f32>,
    y: Vec<f32>,
    y_raw: Vec<u8>,
}

fn assemble(seqs: &[&RadarSequence], starts: &[usize], t_in: usize, t_out: usize) -> Batch {
    let (h, w) = (seqs[0].height(), seqs[0].width());
    let mut x = Vec::with_capacity(seqs.len() * t_in * h * w);
    let mut y_raw = Vec::with_capacity(seqs.len() * t_out * h * w);
    for (seq, &r) in seqs.iter().zip(starts) {
        x.extend(seq.frames.slice(s![r..r + t_in, .., ..]).iter().map(|&v| f32::from(v) / 255.0));
        y_raw.extend(seq.frames.slice(s![r + t_in..r + t_in + t_out, .., ..]).iter().copied());
    }
    Batch {
        x: Tensor::from_vec([seqs.len(), t_in, h, w], x),
        y: y_raw.iter().map(|&v| f32::from(v) / 255.0).collect(),
        y_raw,
    }
}

fn check_data(data: &TrainData, t_in: usize, t_out: usize) -> Result<()> {
    if data.train.is_empty() {
        return Err(Error::Validation {
            id: "<train>".into(),
            reason: "training set is empty".into(),
        });
    }
    let (h, w) = (data.train[0].height(), data.train[0].width());
    for seq in data.train.iter().chain(data.val) {
        if seq.len() < t_in + t_out {
            return Err(Error::Validation {
                id: seq.id.clone(),
                reason: format!("{} frames, model needs {}", seq.len(), t_in + t_out),
            });
        }
        if (seq.height(), seq.width()) != (h, w) {
            return Err(Error::Validation {
                id: seq.id.clone(),
                reason: format!("grid {}x{} differs from {h}x{w}", seq.height(), seq.width()),
            });
        }
    }
    Ok(())
}

/// Loss and CSI-M (unpooled) of the first window of every validation sequence.
pub fn validate(
    model: &NowcastModel<f32>,
    val: &[RadarSequence],
    loss: &LossConfig,
    thresholds: &[f64],
    batch_size: usize,
) -> Result<(f64, f64)> {
    let (t_in, t_out) = (model.config().t_in, model.config().t_out);
    let eval_cfg = EvalConfig {
        thresholds: thresholds.to_vec(),
        pools: vec![1],
        lead_time_threshold: *thresholds.last().unwrap_or(&219.0),
        batch_size,
    };
    let mut ev = Evaluator::new(&eval_cfg, t_out, 1)?;
    let (mut loss_sum, mut n) = (0.0, 0usize);
    for chunk in val.chunks(batch_size) {
        let refs: Vec<&RadarSequence> = chunk.iter().collect();
        let batch = assemble(&refs, &vec![0; chunk.len()], t_in, t_out);
        let pred = model.forward(&batch.x)?;
        loss_sum += weighted_mse(pred.data(), &batch.y, &batch.y_raw, loss)? * chunk.len() as f64;
        n += chunk.len();
        let (h, w) = (chunk[0].height(), chunk[0].width());
        let per = t_out * h * w;
        for i in 0..chunk.len() {
            let p = ndarray::ArrayView3::from_shape((t_out, h, w), pred.item(i)).expect("batch layout");
            let g = ndarray::ArrayView3::from_shape((t_out, h, w), &batch.y_raw[i * per..(i + 1) * per]).expect("batch layout");
            ev.add(p, g)?;
        }
    }
    Ok((loss_sum / n.max(1) as f64, ev.finish().csi_m(1)))
}

fn better(score: (f64, f64), best: Option<(f64, f64)>) -> bool {
    let key = |(csi, loss): (f64, f64)| (if csi.is_nan() { f64::NEG_INFINITY } else { csi }, -loss);
    match best {
        None => true,
        Some(b) => {
            let (a, b) = (key(score), key(b));
            a.0 > b.0 || (a.0 == b.0 && a.1 > b.1)
        }
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn global_clip(grads: &mut [f32], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.iter().map(|&g| f64::from(g) * f64::from(g)).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
}

/// Trains `model` on windows drawn by `sampler`, keeping the weights with the
/// best validation CSI-M (ties broken by validation loss).
pub fn train(
    model: NowcastModel<f32>,
    data: &TrainData,
    sampler: &StartSampler,
    loss: &LossConfig,
    thresholds: &[f64],
    cfg: &TrainConfig,
    run: Option<&RunDir>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss.validate()?;
    let (t_in, t_out) = (model.config().t_in, model.config().t_out);
    check_data(data, t_in, t_out)?;

    let resumed = match run {
        Some(r) if r.resume && r.path.join(STATE_FILE).exists() => {
            let state = load_checkpoint(&r.path.join(STATE_FILE))?;
            if state.model.config() != model.config() {
                return Err(Error::config("model", "resumed state has a different model configuration"));
            }
            if state.config != *cfg {
                log::warn!("resuming with a training configuration that differs from the saved one");
            }
            log::info!("resuming {} after epoch {}", r.path.display(), state.epoch);
            Some(state)
        }
        _ => None,
    };
    let mut state = match resumed {
        Some(mut s) => {
            s.config = cfg.clone();
            s
        }
        None => {
            let seed = if cfg.deterministic { cfg.seed } else { cfg.seed ^ rand::random::<u64>() };
            TrainState {
                optimizer: Adam::new(model.parameter_count()),
                best: model.clone(),
                model,
                epoch: 0,
                history: TrainHistory::default(),
                best_score: None,
                rounds_since_best: 0,
                seed,
                config: cfg.clone(),
            }
        }
    };
    if let Some(r) = run {
        fs::create_dir_all(&r.path).map_err(|e| Error::io(&r.path, e))?;
        // the log mirrors the state being continued
        let mut text = String::new();
        for rec in &state.history.epochs {
            text.push_str(&serde_json::to_string(rec).expect("record serializes"));
            text.push('\n');
        }
        write_atomic(&r.path.join(HISTORY_FILE), text.as_bytes())?;
    }

    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.max_epochs as u64;
    let mut stopped = false;
    while state.epoch < cfg.max_epochs && !stopped {
        let epoch = state.epoch;
        let started = Instant::now();
        let mut rng = epoch_rng(state.seed, epoch);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let seqs: Vec<&RadarSequence> = idx.iter().map(|&i| &data.train[i]).collect();
            let starts = seqs.iter().map(|s| sampler(s.len(), &mut rng)).collect::<Result<Vec<_>>>()?;
            for (s, &r) in seqs.iter().zip(&starts) {
                if r + t_in + t_out > s.len() {
                    return Err(Error::Validation {
                        id: s.id.clone(),
                        reason: format!("sampler chose start {r} beyond the valid range"),
                    });
                }
            }
            let batch = assemble(&seqs, &starts, t_in, t_out);
            let (pred, cache) = state.model.forward_train(&batch.x)?;
            let (value, grad) = weighted_mse_with_grad(pred.data(), &batch.y, &batch.y_raw, loss)?;
            if !value.is_finite() {
                let ids: Vec<String> = seqs.iter().map(|s| s.id.clone()).collect();
                if let Some(r) = run {
                    let snapshot = serde_json::json!({ "epoch": epoch, "batch_ids": ids, "loss": value.to_string() });
                    write_atomic(&r.path.join("failure.json"), snapshot.to_string().as_bytes())?;
                }
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch_ids: ids,
                    loss: value,
                });
            }
            state.model.params_mut().zero_grad();
            state.model.backward(cache, &Tensor::from_vec(pred.shape(), grad));
            let lr = cfg.lr_at(state.optimizer.step, total_steps);
            let (values, grads) = state.model.params_mut().values_and_grads_mut();
            global_clip(grads, cfg.grad_clip);
            state.optimizer.update(values, grads, lr, cfg);
            loss_sum += value * seqs.len() as f64;
            seen += seqs.len();
        }

        let last = epoch + 1 == cfg.max_epochs;
        let (mut val_loss, mut val_csi_m) = (None, None);
        if !data.val.is_empty() && ((epoch + 1) % cfg.val_interval == 0 || last) {
            let (vl, vc) = validate(&state.model, data.val, loss, thresholds, cfg.batch_size)?;
            val_loss = Some(vl);
            val_csi_m = (!vc.is_nan()).then_some(vc);
            if better((vc, vl), state.best_score) {
                state.best_score = Some((vc, vl));
                state.best = state.model.clone();
                state.history.selected_epoch = Some(epoch);
                state.rounds_since_best = 0;
                if let Some(r) = run {
                    save_model(&state.best, &r.path.join(BEST_FILE))?;
                }
            } else {
                state.rounds_since_best += 1;
                if cfg.patience > 0 && state.rounds_since_best >= cfg.patience {
                    log::info!("early stop after epoch {epoch}: no improvement in {} rounds", cfg.patience);
                    stopped = true;
                }
            }
        }
        if data.val.is_empty() {
            state.best = state.model.clone();
            state.history.selected_epoch = Some(epoch);
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            val_loss,
            val_csi_m,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train loss {:.6}, val loss {}, val CSI-M {}",
            record.train_loss,
            val_loss.map_or("-".into(), |v| format!("{v:.6}")),
            val_csi_m.map_or("-".into(), |v| format!("{v:.4}"))
        );
        state.history.epochs.push(record.clone());
        state.epoch += 1;
        if let Some(r) = run {
            if data.val.is_empty() {
                save_model(&state.best, &r.path.join(BEST_FILE))?;
            }
            save_checkpoint(&state, &r.path.join(STATE_FILE))?;
            let mut f = OpenOptions::new()
                .append(true)
                .create(true)
                .open(r.path.join(HISTORY_FILE))
                .map_err(|e| Error::io(r.path.join(HISTORY_FILE), e))?;
            writeln!(f, "{}", serde_json::to_string(&record).expect("record serializes"))
                .map_err(|e| Error::io(r.path.join(HISTORY_FILE), e))?;
        }
    }
    Ok(TrainOutcome {
        best: state.best,
        last: state.model,
        history: state.history,
    })
}

#[cfg(test)]
mod tests;
