//! Exit codes and artifacts of the command-line interface.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use slotmoe::pipeline::ExperimentConfig;

fn slotmoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slotmoe")).args(args).output().expect("run slotmoe")
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let cfg = ExperimentConfig {
        d: 4,
        d_e: 4,
        d_p: 4,
        slots: 4,
        steps: 3,
        batch_per_task: 1,
        eval_samples: 1,
        ..ExperimentConfig::desk()
    };
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn train_then_eval_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let out = slotmoe(&["train", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["train_log.csv", "dwa_log.csv", "checkpoint/manifest.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let eval = dir.path().join("eval");
    let out = slotmoe(&[
        "eval",
        "--checkpoint",
        run.join("checkpoint").to_str().unwrap(),
        "--out",
        eval.to_str().unwrap(),
        "--tasks",
        "denoise,deblur",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(eval.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "{csv}");
    assert!(String::from_utf8_lossy(&out.stderr).contains("deblur"));
}

#[test]
fn invalid_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let mut cfg = serde_json::to_value(ExperimentConfig::desk()).unwrap();
    cfg["top_k"] = serde_json::json!(5);
    fs::write(&path, cfg.to_string()).unwrap();
    let out = slotmoe(&["train", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(slotmoe(&["profile", "nope"]).status.code(), Some(2));
}

#[test]
fn verify_suite_reports_and_unknown_suite_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("report.json");
    let out = slotmoe(&["verify", "--suite", "metrics", "--json", json.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report["passed"], serde_json::json!(true));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("PASS"));
    let out = slotmoe(&["verify", "--suite", "bogus", "--json", json.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fixtures_dump_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = slotmoe(&["fixtures", "--task", "destripe", "--seed", "7", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sample = slotmoe::degrade::read_fixture(dir.path()).unwrap();
    assert_eq!(sample.seed, 7);
    assert_eq!(sample.degraded.shape(), &[4, 16, 16]);
    assert_eq!(slotmoe(&["fixtures", "--task", "sharpen", "--seed", "1", "--out", "x"]).status.code(), Some(2));
}
