use rand::Rng;

use super::*;
use crate::model::{init_model, ModelConfig, CHECKPOINT_VERSION};
use crate::radar_data::{generate_synthetic, SyntheticGenConfig, SEVIR_THRESHOLDS};

fn tiny_model(seed: u64) -> NowcastModel<f32> {
    init_model(&ModelConfig {
        t_in: 4,
        t_out: 3,
        hid_spatial: 4,
        hid_temporal: 8,
        n_spatial_blocks: 1,
        n_temporal_blocks: 2,
        inception_kernels: vec![3],
        groups: 2,
        seed,
    })
    .unwrap()
}

fn data(n: usize, seed: u64) -> Vec<RadarSequence> {
    generate_synthetic(&SyntheticGenConfig {
        n_sequences: n,
        height: 16,
        width: 16,
        t_total: 9,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn uniform(t_in: usize, t_out: usize) -> impl Fn(usize, &mut ChaCha8Rng) -> Result<usize> + Sync {
    move |len, rng| Ok(rng.random_range(0..=len - t_in - t_out))
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs: epochs,
        batch_size: 4,
        learning_rate: 0.005,
        ..Default::default()
    }
}

#[test]
fn identical_runs_give_identical_parameters() {
    let (train_set, val) = (data(8, 1), data(4, 2));
    let d = TrainData { train: &train_set, val: &val };
    let run = || train(tiny_model(0), &d, &uniform(4, 3), &LossConfig::default(), &SEVIR_THRESHOLDS, &quick(1), None).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.last.params().values(), b.last.params().values());
    assert_ne!(a.last.params().values(), tiny_model(0).params().values());
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let (train_set, val) = (data(8, 1), data(4, 2));
    let d = TrainData { train: &train_set, val: &val };
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..quick(1)
    };
    let out = train(tiny_model(0), &d, &uniform(4, 3), &LossConfig::default(), &SEVIR_THRESHOLDS, &cfg, None).unwrap();
    assert_eq!(out.last.params().values(), tiny_model(0).params().values());
}

#[test]
fn training_reduces_loss() {
    let (train_set, val) = (data(16, 3), data(4, 4));
    let d = TrainData { train: &train_set, val: &val };
    let out = train(tiny_model(1), &d, &uniform(4, 3), &LossConfig::default(), &SEVIR_THRESHOLDS, &quick(20), None).unwrap();
    let losses = out.history.train_losses();
    assert_eq!(losses.len(), 20);
    assert!(losses[19] < losses[0], "{losses:?}");
}

#[test]
fn selected_epoch_has_best_validation_score() {
    let (train_set, val) = (data(8, 5), data(4, 6));
    let d = TrainData { train: &train_set, val: &val };
    let out = train(tiny_model(2), &d, &uniform(4, 3), &LossConfig::default(), &[16.0, 74.0], &quick(6), None).unwrap();
    let h = &out.history;
    let sel = h.selected_epoch.unwrap();
    let best = h.epochs.iter().map(|e| e.val_csi_m.unwrap_or(f64::NEG_INFINITY)).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(h.epochs[sel].val_csi_m.unwrap_or(f64::NEG_INFINITY), best);
    let (_, csi) = validate(&out.best, &val, &LossConfig::default(), &[16.0, 74.0], 4).unwrap();
    assert_eq!(Some(csi).filter(|c| !c.is_nan()), h.epochs[sel].val_csi_m);
}

#[test]
fn small_step_along_negative_gradient_decreases_batch_loss() {
    let seqs = data(4, 7);
    let refs: Vec<&RadarSequence> = seqs.iter().collect();
    let batch = assemble(&refs, &[0, 1, 2, 0], 4, 3);
    let mut model = tiny_model(3);
    let cfg = LossConfig::default();
    let (pred, cache) = model.forward_train(&batch.x).unwrap();
    let (before, grad) = weighted_mse_with_grad(pred.data(), &batch.y, &batch.y_raw, &cfg).unwrap();
    model.params_mut().zero_grad();
    model.backward(cache, &Tensor::from_vec(pred.shape(), grad));
    let (values, grads) = model.params_mut().values_and_grads_mut();
    let g2: f32 = grads.iter().map(|g| g * g).sum();
    let step = 1e-3 / g2.sqrt();
    for (v, g) in values.iter_mut().zip(grads.iter()) {
        *v -= step * g;
    }
    let (pred, _) = model.forward_train(&batch.x).unwrap();
    let after = weighted_mse(pred.data(), &batch.y, &batch.y_raw, &cfg).unwrap();
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn non_finite_loss_aborts_with_batch_ids() {
    let (train_set, val) = (data(4, 1), data(2, 2));
    let d = TrainData { train: &train_set, val: &val };
    let mut model = tiny_model(0);
    model.params_mut().values_mut().iter_mut().for_each(|v| *v = 1e30);
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir {
        path: dir.path().into(),
        resume: false,
    };
    match train(model, &d, &uniform(4, 3), &LossConfig::default(), &SEVIR_THRESHOLDS, &quick(1), Some(&run)) {
        Err(Error::NonFiniteLoss { epoch, batch_ids, .. }) => {
            assert_eq!(epoch, 0);
            assert_eq!(batch_ids.len(), 4);
            assert!(batch_ids.iter().all(|id| train_set.iter().any(|s| &s.id == id)));
        }
        other => panic!("expected non-finite loss, got {other:?}"),
    }
    assert!(dir.path().join("failure.json").exists());
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let (train_set, val) = (data(8, 1), data(4, 2));
    let d = TrainData { train: &train_set, val: &val };
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir {
        path: dir.path().into(),
        resume: false,
    };
    let out = train(tiny_model(0), &d, &uniform(4, 3), &LossConfig::default(), &SEVIR_THRESHOLDS, &quick(2), Some(&run)).unwrap();
    let path = dir.path().join(STATE_FILE);
    let state = load_checkpoint(&path).unwrap();
    assert_eq!(state.epoch, 2);
    assert_eq!(state.model.params().values(), out.last.params().values());
    assert_eq!(state.best.params().values(), out.best.params().values());
    assert_eq!(state.history, out.history);
    assert_eq!(state.optimizer.step, 4);
    let x = Tensor::from_vec([1, 4, 16, 16], vec![0.25f32; 4 * 256]);
    assert_eq!(state.model.forward(&x).unwrap(), out.last.forward(&x).unwrap());
    let best = crate::model::load_model(&dir.path().join(BEST_FILE)).unwrap();
    assert_eq!(best.params().values(), out.best.params().values());
    let lines = std::fs::read_to_string(dir.path().join(HISTORY_FILE)).unwrap();
    assert_eq!(lines.lines().count(), 2);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::CheckpointVersion { .. })));
    let mut bytes = std::fs::read(dir.path().join(BEST_FILE)).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 1;
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_checkpoint(&path).is_err());
    // a plain model archive is not a training state
    save_model(&out.best, &path).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::CorruptCheckpoint(_))));
}

#[test]
fn resume_matches_straight_run() {
    let (train_set, val) = (data(8, 1), data(4, 2));
    let d = TrainData { train: &train_set, val: &val };
    let sampler = uniform(4, 3);
    let loss = LossConfig::default();
    let straight = train(tiny_model(0), &d, &sampler, &loss, &SEVIR_THRESHOLDS, &quick(4), None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let run = RunDir {
        path: dir.path().into(),
        resume: true,
    };
    train(tiny_model(0), &d, &sampler, &loss, &SEVIR_THRESHOLDS, &quick(2), Some(&run)).unwrap();
    assert!(matches!(
        train(tiny_model(9), &d, &sampler, &loss, &SEVIR_THRESHOLDS, &quick(4), Some(&run)),
        Err(Error::Config { .. })
    ));
    let resumed = train(tiny_model(0), &d, &sampler, &loss, &SEVIR_THRESHOLDS, &quick(4), Some(&run)).unwrap();
    assert_eq!(resumed.last.params().values(), straight.last.params().values());
    assert_eq!(resumed.best.params().values(), straight.best.params().values());
    assert_eq!(resumed.history.epochs.len(), 4);
    assert_eq!(resumed.history.train_losses(), straight.history.train_losses());
    let lines = std::fs::read_to_string(dir.path().join(HISTORY_FILE)).unwrap();
    assert_eq!(lines.lines().count(), 4);
}

#[test]
fn one_cycle_schedule_shape() {
    let cfg = TrainConfig {
        one_cycle: true,
        ..Default::default()
    };
    let total = 100;
    let lrs: Vec<f64> = (0..total).map(|s| cfg.lr_at(s, total)).collect();
    assert!((lrs[0] - 0.005 / 25.0).abs() < 1e-12);
    assert!((lrs[30] - 0.005).abs() < 1e-12);
    assert!(lrs[99] < lrs[60] && lrs[60] < lrs[30]);
    assert_eq!(TrainConfig::default().lr_at(42, total), 0.005);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { batch_size: 0, ..Default::default() },
        TrainConfig { learning_rate: -1.0, ..Default::default() },
        TrainConfig { beta2: 1.0, ..Default::default() },
        TrainConfig { val_interval: 0, ..Default::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config { .. })));
    }
}

#[test]
fn rejects_short_sequences() {
    let short = data(2, 1).into_iter().map(|s| s.truncated(6)).collect::<Vec<_>>();
    let d = TrainData { train: &short, val: &[] };
    assert!(matches!(
        train(tiny_model(0), &d, &uniform(4, 3), &LossConfig::default(), &SEVIR_THRESHOLDS, &quick(1), None),
        Err(Error::Validation { .. })
    ));
}
