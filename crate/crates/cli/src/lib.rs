//! Pipeline commands behind the `nowcast` binary.
//!
//! Run directory layout:
//!
//! ```text
//! <run_dir>/config.toml              snapshot of the resolved configuration
//! <run_dir>/data/{train,val,test}/   generated datasets
//! <run_dir>/teacher/                 short-horizon training run
//! <run_dir>/augmented/               teacher-extended training set
//! <run_dir>/student/                 long-horizon run on the augmented set
//! <run_dir>/baseline/                long-horizon run without distillation
//! <run_dir>/eval/<name>/             report.json and lead_time.svg
//! ```

pub mod config;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use nowcast_core::distill::{self, StageSettings};
use nowcast_core::metrics::{evaluate_dataset, evaluate_pairs, plot_lead_time, MetricReport};
use nowcast_core::model::{file_sha256, load_model, NowcastModel};
use nowcast_core::radar_data::{generate_synthetic, load_dataset, normalize, split, write_dataset, RadarSequence};
use nowcast_core::trainer::{RunDir, TrainOutcome, BEST_FILE};

pub use config::RunConfig;

pub const TEACHER_DIR: &str = "teacher";
pub const STUDENT_DIR: &str = "student";
pub const BASELINE_DIR: &str = "baseline";
pub const AUGMENTED_DIR: &str = "augmented";
pub const EVAL_DIR: &str = "eval";
pub const REPORT_FILE: &str = "report.json";
pub const PLOT_FILE: &str = "lead_time.svg";

fn settings(cfg: &RunConfig) -> StageSettings<'_> {
    StageSettings {
        model: &cfg.model,
        distill: &cfg.distill,
        loss: &cfg.loss,
        train: &cfg.train,
        thresholds: &cfg.data.thresholds,
    }
}

/// Writes the resolved configuration next to the run's outputs.
pub fn snapshot_config(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.run_dir();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("config.toml");
    let tmp = dir.join(".config.toml.tmp");
    std::fs::write(&tmp, cfg.to_toml()).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, &path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub struct DataSummary {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub heavy: usize,
}

/// Generates, splits and writes the synthetic datasets.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<DataSummary> {
    let seqs = generate_synthetic(&cfg.synthetic)?;
    let top = cfg.data.top_threshold();
    let heavy = seqs.iter().filter(|s| s.frames.iter().any(|&v| f64::from(v) > top)).count();
    let s = &cfg.split;
    let parts = split(seqs, (s.train, s.val, s.test), s.seed)?;
    let root = cfg.data_dir();
    for (name, part) in [("train", &parts.train), ("val", &parts.val), ("test", &parts.test)] {
        write_dataset(part, &root.join(name)).with_context(|| format!("writing {name} split"))?;
    }
    let summary = DataSummary {
        train: parts.train.len(),
        val: parts.val.len(),
        test: parts.test.len(),
        heavy,
    };
    println!(
        "wrote {} train, {} val, {} test sequences to {} ({heavy} contain pixels above {top})",
        summary.train,
        summary.val,
        summary.test,
        root.display()
    );
    Ok(summary)
}

fn load_split(cfg: &RunConfig, name: &str) -> Result<Vec<RadarSequence>> {
    let path = cfg.data_dir().join(name);
    load_dataset(&path, &cfg.data).with_context(|| format!("loading {name} data from {}", path.display()))
}

fn run_dir(cfg: &RunConfig, name: &str, resume: bool) -> RunDir {
    RunDir {
        path: cfg.run_dir().join(name),
        resume,
    }
}

fn report_training(name: &str, out: &TrainOutcome, dir: &Path) {
    let h = &out.history;
    let last = h.epochs.last().map_or(f64::NAN, |e| e.train_loss);
    let sel = h.selected_epoch.map_or("-".into(), |e| e.to_string());
    let best = h.best_val_csi_m().map_or("-".into(), |v| format!("{v:.4}"));
    println!(
        "{name}: {} epochs, final train loss {last:.6}, selected epoch {sel} (val CSI-M {best}), checkpoint {}",
        h.epochs.len(),
        dir.join(BEST_FILE).display()
    );
}

pub fn cmd_train_short(cfg: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    let (train, val) = (load_split(cfg, "train")?, load_split(cfg, "val")?);
    let run = run_dir(cfg, TEACHER_DIR, resume);
    let out = distill::train_short(&train, &val, &settings(cfg), Some(&run))?;
    report_training("teacher", &out, &run.path);
    Ok(out)
}

pub fn teacher_path(cfg: &RunConfig) -> PathBuf {
    cfg.run_dir().join(TEACHER_DIR).join(BEST_FILE)
}

pub fn cmd_augment(cfg: &RunConfig, teacher: Option<&Path>) -> Result<PathBuf> {
    let teacher_file = teacher.map_or_else(|| teacher_path(cfg), Path::to_path_buf);
    let model = load_model(&teacher_file).with_context(|| format!("loading teacher {}", teacher_file.display()))?;
    let hash = file_sha256(&teacher_file)?;
    let train = load_split(cfg, "train")?;
    let augmented = distill::augment_dataset(&model, &train, &cfg.distill)?;
    let out = cfg.run_dir().join(AUGMENTED_DIR);
    distill::write_augmented(&augmented, &out, &hash, cfg.data.interval_minutes)?;
    println!(
        "augmented {} sequences to {} frames (boundary {}) in {}",
        augmented.len(),
        cfg.distill.augmented_len(),
        cfg.distill.source_len(),
        out.display()
    );
    Ok(out)
}

pub fn cmd_train_long(cfg: &RunConfig, resume: bool, teacher: Option<&Path>) -> Result<TrainOutcome> {
    let aug_dir = cfg.run_dir().join(AUGMENTED_DIR);
    let (augmented, recorded) = distill::load_augmented(&aug_dir, &cfg.augmented_spec())
        .with_context(|| format!("loading augmented data from {}", aug_dir.display()))?;
    let teacher_file = teacher.map_or_else(|| teacher_path(cfg), Path::to_path_buf);
    match (recorded, teacher_file.exists()) {
        (Some(rec), true) => {
            let current = file_sha256(&teacher_file)?;
            if rec != current {
                log::warn!(
                    "teacher checkpoint {} does not match the hash recorded with the augmented data ({rec} vs {current})",
                    teacher_file.display()
                );
            }
        }
        (None, _) => log::warn!("augmented data carries no teacher hash"),
        (Some(_), false) => log::warn!("teacher checkpoint {} not found; cannot verify the augmented data", teacher_file.display()),
    }
    let val = load_split(cfg, "val")?;
    let run = run_dir(cfg, STUDENT_DIR, resume);
    let out = distill::train_long(&augmented, &val, &settings(cfg), Some(&run))?;
    report_training("student", &out, &run.path);
    Ok(out)
}

pub fn cmd_train_baseline(cfg: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    let (train, val) = (load_split(cfg, "train")?, load_split(cfg, "val")?);
    let run = run_dir(cfg, BASELINE_DIR, resume);
    let out = distill::train_baseline(&train, &val, &settings(cfg), Some(&run))?;
    report_training("baseline", &out, &run.path);
    Ok(out)
}

/// Where `cmd_eval` reads and writes.
pub struct EvalTarget {
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Score the ground truth against itself instead of a model.
    pub self_check: bool,
}

fn crop_for(model: &NowcastModel<f32>, seqs: &[RadarSequence]) -> Vec<RadarSequence> {
    let len = model.config().t_in + model.config().t_out;
    seqs.iter().map(|s| if s.len() > len { s.truncated(len) } else { s.clone() }).collect()
}

pub fn cmd_eval(cfg: &RunConfig, target: &EvalTarget) -> Result<MetricReport> {
    let data_path = target.dataset.clone().unwrap_or_else(|| cfg.data_dir().join("test"));
    let seqs = load_dataset(&data_path, &cfg.data).with_context(|| format!("loading {}", data_path.display()))?;
    let eval_cfg = cfg.eval_config();
    let report = if target.self_check {
        let (t_in, t_out) = (cfg.data.t_in, cfg.data.t_out);
        let targets: Vec<_> = seqs.iter().map(|s| s.truncated(t_in + t_out)).collect();
        let norm: Vec<_> = targets.iter().map(normalize).collect();
        let pairs: Vec<_> = norm
            .iter()
            .zip(&targets)
            .map(|(n, s)| (n.slice(ndarray::s![t_in.., .., ..]), s.frames.slice(ndarray::s![t_in.., .., ..])))
            .collect();
        evaluate_pairs(&pairs, &eval_cfg, cfg.data.interval_minutes)?
    } else {
        let Some(ckpt) = target.checkpoint.as_deref() else {
            bail!("eval needs --checkpoint unless --self-check is given");
        };
        let model = load_model(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
        evaluate_dataset(&model, &crop_for(&model, &seqs), &cfg.data, &eval_cfg)?
    };
    report.write(&target.out_dir.join(REPORT_FILE))?;
    plot_lead_time(&report.lead_time, &target.out_dir.join(PLOT_FILE))?;
    println!(
        "{} samples: CSI-M pool1 {:.4}, CSI-{} pool1 {:.4}, HSS {}, SSIM {}, CRPS {}; report in {}",
        report.sample_count,
        report.csi_m(1),
        cfg.data.top_threshold(),
        report.csi(cfg.data.top_threshold(), 1),
        fmt_opt(report.hss),
        fmt_opt(report.ssim),
        fmt_opt(report.crps),
        target.out_dir.display()
    );
    Ok(report)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.4}"))
}

/// Rows of the comparison printed by `run-all`.
pub fn comparison_table(cfg: &RunConfig, rows: &[(&str, &MetricReport)]) -> String {
    let top = cfg.data.top_threshold();
    let mut out = String::from("model     ");
    for p in &cfg.eval.pools {
        out.push_str(&format!("  CSI-M/{p:<3}"));
    }
    out.push_str(&format!("  CSI-{top:<5}\n"));
    for (name, r) in rows {
        out.push_str(&format!("{name:<10}"));
        for &p in &cfg.eval.pools {
            out.push_str(&format!("  {:>9.4}", r.csi_m(p)));
        }
        out.push_str(&format!("  {:>9.4}\n", r.csi(top, 1)));
    }
    out
}

fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    log::info!("stage {name}");
    f().with_context(|| format!("stage `{name}` failed"))
}

/// Generation, teacher, augmentation, student, optional baseline, evaluation.
pub fn cmd_run_all(cfg: &RunConfig, skip_baseline: bool, resume: bool) -> Result<String> {
    snapshot_config(cfg)?;
    stage("gen-data", || cmd_gen_data(cfg))?;
    stage("train-short", || cmd_train_short(cfg, resume))?;
    stage("augment", || cmd_augment(cfg, None))?;
    stage("train-long", || cmd_train_long(cfg, resume, None))?;
    if !skip_baseline {
        stage("train-baseline", || cmd_train_baseline(cfg, resume))?;
    }
    let eval = |name: &str| -> Result<MetricReport> {
        stage(&format!("eval-{name}"), || {
            cmd_eval(
                cfg,
                &EvalTarget {
                    checkpoint: Some(cfg.run_dir().join(name).join(BEST_FILE)),
                    dataset: None,
                    out_dir: cfg.run_dir().join(EVAL_DIR).join(name),
                    self_check: false,
                },
            )
        })
    };
    let student = eval(STUDENT_DIR)?;
    let baseline = if skip_baseline { None } else { Some(eval(BASELINE_DIR)?) };
    let mut rows = Vec::new();
    if let Some(b) = &baseline {
        rows.push(("baseline", b));
    }
    rows.push(("student", &student));
    let table = comparison_table(cfg, &rows);
    print!("{table}");
    Ok(table)
}
