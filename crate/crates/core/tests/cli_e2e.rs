//! End-to-end exercises of the binary: the full pipeline, exit codes,
//! and argument validation.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_marginflow")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn binary")
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("marginflow-e2e-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, v: serde_json::Value) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    p
}

fn linear_config(iterations: u64, batch: usize, gamma: f64) -> serde_json::Value {
    serde_json::json!({
        "spec": {"layer_widths": [2, 1], "activation": {"kind": "linear"}},
        "loss": "exp",
        "schedule": {"kind": "constant", "gamma": gamma},
        "batch_size": batch,
        "iterations": iterations,
        "seed": 5,
        "kink": {"e": 0.0},
        "record_stride": 10,
        "snapshot_stride": 100,
        "init": {"kind": "scale", "scale": 0.1}
    })
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
    assert_eq!(run(&["train", "--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    // missing required --n
    let out = run(&["gen-data", "linear", "--d", "2", "--margin", "0.3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--n"));
}

#[test]
fn invalid_config_exits_one() {
    let dir = tmp("badcfg");
    let out = run(&[
        "gen-data", "linear", "--n", "8", "--d", "2", "--margin", "0.3",
        "--out-dir", dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    // batch larger than the dataset
    let cfg = write_config(&dir, linear_config(100, 99, 0.1));
    let out = run(&[
        "train",
        "--config", cfg.to_str().unwrap(),
        "--data", dir.join("dataset.csv").to_str().unwrap(),
        "--out-dir", dir.join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn pipeline_train_analyze_flow() {
    let dir = tmp("pipeline");
    let out = run(&[
        "gen-data", "linear", "--n", "16", "--d", "2", "--margin", "0.3", "--seed", "4",
        "--out-dir", dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let data = dir.join("dataset.csv");
    assert!(data.exists() && dir.join("dataset_meta.json").exists());

    let cfg = write_config(&dir, linear_config(20_000, 16, 0.1));
    let run_dir = dir.join("run");
    let out = run(&[
        "train",
        "--config", cfg.to_str().unwrap(),
        "--data", data.to_str().unwrap(),
        "--out-dir", run_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["records.csv", "snapshots.csv", "manifest.json"] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("final_normalized_margin"), "stdout: {stdout}");

    let out = run(&[
        "analyze",
        "--config", cfg.to_str().unwrap(),
        "--data", data.to_str().unwrap(),
        "--run-dir", run_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("analysis.json")).unwrap())
            .unwrap();
    assert!(summary["k_sep"].is_number(), "no separation in {summary}");
    assert!(summary["growth_fit"]["r_squared"].as_f64().unwrap() > 0.9);
    assert!(summary["final_state"]["normalized_margin"].as_f64().unwrap() > 0.0);
    let remainders = std::fs::read_to_string(run_dir.join("remainders.csv")).unwrap();
    assert!(remainders.lines().count() > 1);

    let out = run(&[
        "flow",
        "--config", cfg.to_str().unwrap(),
        "--data", data.to_str().unwrap(),
        "--u0", "1.0,0.5",
        "--steps", "20000",
        "--out-dir", run_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let flow = std::fs::read_to_string(run_dir.join("flow.csv")).unwrap();
    assert!(flow.starts_with("step,"));
    assert!(flow.lines().count() > 1);
}

#[test]
fn gradient_check_passes_and_detects_injected_fault() {
    let out = run(&["check-grad", "--cases", "40", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&["check-grad", "--cases", "40", "--seed", "3", "--inject-fault"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergent_run_aborts_with_code_two() {
    let dir = tmp("abort");
    let out = run(&[
        "gen-data", "xor-ring", "--n", "16", "--seed", "1",
        "--out-dir", dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    // non-separable data with a large step: misclassified margins grow, the
    // exponential loss derivative overflows within a few iterations
    let cfg = write_config(
        &dir,
        serde_json::json!({
            "spec": {"layer_widths": [2, 1], "activation": {"kind": "linear"}},
            "loss": "exp",
            "schedule": {"kind": "constant", "gamma": 10.0},
            "batch_size": 16,
            "iterations": 1000,
            "seed": 5,
            "kink": {"e": 0.0},
            "record_stride": 1,
            "snapshot_stride": 100,
            "init": {"kind": "scale", "scale": 0.1}
        }),
    );
    let out = run(&[
        "train",
        "--config", cfg.to_str().unwrap(),
        "--data", dir.join("dataset.csv").to_str().unwrap(),
        "--out-dir", dir.join("run").to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.join("run").join("abort.json").exists());
}
