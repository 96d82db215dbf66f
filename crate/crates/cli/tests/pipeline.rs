use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use serde_json::Value;
use tempfile::TempDir;

fn nowcast(run_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nowcast"))
        .arg("--profile")
        .arg("smoke")
        .arg("--run-dir")
        .arg(run_dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("NOWCAST_RUN_ROOT")
        .output()
        .expect("spawn nowcast")
}

fn ok(out: &Output) -> String {
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "exit {:?}\n{stderr}", out.status);
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn gen_data_is_deterministic() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    ok(&nowcast(a.path(), &["gen-data"]));
    ok(&nowcast(b.path(), &["gen-data"]));
    for split in ["train", "val", "test"] {
        assert_eq!(
            read_dir_bytes(&a.path().join("data").join(split)),
            read_dir_bytes(&b.path().join("data").join(split)),
            "{split}"
        );
    }
}

#[test]
fn bad_split_is_rejected() {
    let dir = TempDir::new().unwrap();
    let out = nowcast(dir.path(), &["--set", "split.train=0.9", "gen-data"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("split"), "{err}");
    assert!(!dir.path().join("data").exists());
}

#[test]
fn missing_dataset_fails() {
    let dir = TempDir::new().unwrap();
    let out = nowcast(dir.path(), &["train-short"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train"), "{err}");
}

#[test]
fn unknown_key_and_profile_fail() {
    let dir = TempDir::new().unwrap();
    assert!(!nowcast(dir.path(), &["--set", "train.bogus=1", "gen-data"]).status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_nowcast"))
        .args(["--profile", "huge", "gen-data"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("huge"));
}

#[test]
fn run_all_smoke() {
    let dir = TempDir::new().unwrap();
    let start = Instant::now();
    let stdout = ok(&nowcast(dir.path(), &["run-all"]));
    assert!(start.elapsed() < Duration::from_secs(120));

    let table: Vec<&str> = stdout.lines().skip_while(|l| !l.starts_with("model")).collect();
    assert_eq!(table.len(), 3, "{stdout}");
    assert!(table[1].starts_with("baseline"));
    assert!(table[2].starts_with("student"));
    for row in &table[1..] {
        let values: Vec<f64> = row.split_whitespace().skip(1).map(|v| v.parse().unwrap()).collect();
        assert_eq!(values.len(), 4);
        assert!(values.iter().all(|v| (0.0..=1.0).contains(v)), "{row}");
    }

    for stage in ["teacher", "student", "baseline"] {
        for f in ["best.ckpt", "state.ckpt", "history.jsonl"] {
            assert!(dir.path().join(stage).join(f).is_file(), "{stage}/{f}");
        }
    }
    for stage in ["student", "baseline"] {
        let report = json(&dir.path().join("eval").join(stage).join("report.json"));
        assert_eq!(report["sample_count"], 4);
        assert!(dir.path().join("eval").join(stage).join("lead_time.svg").is_file());
    }
    assert!(dir.path().join("config.toml").is_file());

    let manifest = json(&dir.path().join("augmented/manifest.json"));
    assert_eq!(manifest["boundary"], 25);
    let seqs = manifest["sequences"].as_array().unwrap();
    assert_eq!(seqs.len(), 32);
    assert!(seqs.iter().all(|s| s["t_total"] == 37));
}

#[test]
fn run_all_without_baseline() {
    let dir = TempDir::new().unwrap();
    let stdout = ok(&nowcast(dir.path(), &["run-all", "--skip-baseline"]));
    let table: Vec<&str> = stdout.lines().skip_while(|l| !l.starts_with("model")).collect();
    assert_eq!(table.len(), 2, "{stdout}");
    assert!(table[1].starts_with("student"));
    assert!(!dir.path().join("baseline").exists());
}

#[test]
fn self_check_is_perfect() {
    let dir = TempDir::new().unwrap();
    ok(&nowcast(dir.path(), &["gen-data"]));
    let out_dir = dir.path().join("self");
    ok(&nowcast(dir.path(), &["eval", "--self-check", "--out", out_dir.to_str().unwrap()]));
    let report = json(&out_dir.join("report.json"));
    let csi_m = report["csi_m"].as_array().unwrap();
    assert!(!csi_m.is_empty());
    for entry in csi_m {
        assert_eq!(entry["value"].as_f64(), Some(1.0), "{entry}");
    }
    assert_eq!(report["ssim"].as_f64(), Some(1.0));
    assert_eq!(report["crps"].as_f64(), Some(0.0));
    let svg = std::fs::read_to_string(out_dir.join("lead_time.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
}

#[test]
fn eval_needs_a_checkpoint() {
    let dir = TempDir::new().unwrap();
    ok(&nowcast(dir.path(), &["gen-data"]));
    let out = nowcast(dir.path(), &["eval"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--checkpoint"));
}

#[test]
fn augment_rerun_and_teacher_hash() {
    let dir = TempDir::new().unwrap();
    ok(&nowcast(dir.path(), &["gen-data"]));
    ok(&nowcast(dir.path(), &["train-short"]));
    ok(&nowcast(dir.path(), &["augment"]));
    let aug = dir.path().join("augmented");
    let first = read_dir_bytes(&aug);
    ok(&nowcast(dir.path(), &["augment"]));
    assert_eq!(first, read_dir_bytes(&aug));

    let out = nowcast(dir.path(), &["train-long"]);
    ok(&out);
    assert!(!String::from_utf8_lossy(&out.stderr).contains("does not match"));

    // A different teacher than the one that produced the augmented data.
    let other = dir.path().join("other.ckpt");
    let mut bytes = std::fs::read(dir.path().join("teacher/best.ckpt")).unwrap();
    bytes.push(0);
    std::fs::write(&other, &bytes).unwrap();
    let out = nowcast(dir.path(), &["train-long", "--teacher", other.to_str().unwrap()]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not match"));
}

#[test]
fn resume_continues_training() {
    let dir = TempDir::new().unwrap();
    ok(&nowcast(dir.path(), &["gen-data"]));
    ok(&nowcast(dir.path(), &["train-short"]));
    let history = dir.path().join("teacher/history.jsonl");
    assert_eq!(std::fs::read_to_string(&history).unwrap().lines().count(), 2);
    ok(&nowcast(dir.path(), &["--epochs", "4", "train-short", "--resume"]));
    let lines: Vec<Value> = std::fs::read_to_string(&history)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4);

    let straight = TempDir::new().unwrap();
    ok(&nowcast(straight.path(), &["gen-data"]));
    ok(&nowcast(straight.path(), &["--epochs", "4", "train-short"]));
    assert_eq!(
        std::fs::read(dir.path().join("teacher/best.ckpt")).unwrap(),
        std::fs::read(straight.path().join("teacher/best.ckpt")).unwrap()
    );
}

#[test]
fn augment_rejects_teacher_with_other_horizon() {
    let dir = TempDir::new().unwrap();
    ok(&nowcast(dir.path(), &["gen-data"]));
    ok(&nowcast(dir.path(), &["train-short"]));
    let out = nowcast(dir.path(), &["--set", "distill.t_short=4", "--set", "distill.rollout_steps=3", "augment"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("t_short"), "{err}");
    assert!(!dir.path().join("augmented").exists());
}

#[test]
fn identical_seeds_give_identical_tables() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let ta = ok(&nowcast(a.path(), &["run-all", "--skip-baseline"]));
    let tb = ok(&nowcast(b.path(), &["run-all", "--skip-baseline"]));
    let table = |s: &str| s.lines().skip_while(|l| !l.starts_with("model")).map(String::from).collect::<Vec<_>>();
    assert_eq!(table(&ta), table(&tb));
}
