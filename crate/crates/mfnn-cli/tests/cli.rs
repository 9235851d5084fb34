//! End-to-end checks of the binary: exit codes, verdict lines, and the
//! reproducibility of emitted report files.

use std::path::Path;
use std::process::{Command, Output};

use mfnn::experiments::StudyReport;

const BIN: &str = env!("CARGO_BIN_EXE_mfnn");

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn base_config(m_grid: &str, steps: usize) -> String {
    format!(
        r#"{{
  "seed": 7,
  "widths": [8, 8],
  "depth": 2,
  "sigma1": 0.8,
  "eta": 0.05,
  "steps": {steps},
  "activation": "tanh",
  "loss": "pseudo_huber",
  "dataset": {{"kind": "gaussian_regression", "n": 4, "d": 3}},
  "m_grid": {m_grid}
}}"#
    )
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

#[test]
fn audit_passes_and_reruns_reproduce_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", &base_config("[8]", 5));
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let first = run(&["audit", "--config", cfg.to_str().unwrap(), "--out", out_a.to_str().unwrap()]);
    assert!(first.status.success(), "stderr: {}", String::from_utf8_lossy(&first.stderr));
    let stdout = String::from_utf8(first.stdout).unwrap();
    assert!(stdout.contains("[PASS] configured_pair"), "stdout: {stdout}");
    assert!(!stdout.contains("[FAIL]"), "stdout: {stdout}");
    let second = run(&["audit", "--config", cfg.to_str().unwrap(), "--out", out_b.to_str().unwrap()]);
    assert!(second.status.success());
    // Point files must be byte-identical; reports match up to wall clock.
    let csv_a = std::fs::read(out_a.join("audit_points.csv")).unwrap();
    let csv_b = std::fs::read(out_b.join("audit_points.csv")).unwrap();
    assert_eq!(csv_a, csv_b);
    let rep_a: StudyReport =
        serde_json::from_str(&std::fs::read_to_string(out_a.join("audit.json")).unwrap()).unwrap();
    let rep_b: StudyReport =
        serde_json::from_str(&std::fs::read_to_string(out_b.join("audit.json")).unwrap()).unwrap();
    assert!(rep_a.same_results(&rep_b));
}

#[test]
fn seed_flag_overrides_the_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", &base_config("[8, 16, 32]", 5));
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let base = run(&["gram", "--config", cfg.to_str().unwrap(), "--out", out_a.to_str().unwrap()]);
    assert!(base.status.code().is_some(), "binary did not run");
    let reseeded = run(&[
        "gram",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "99",
        "--out",
        out_b.to_str().unwrap(),
    ]);
    assert!(reseeded.status.code().is_some());
    let csv_a = std::fs::read(out_a.join("gram_points.csv")).unwrap();
    let csv_b = std::fs::read(out_b.join("gram_points.csv")).unwrap();
    assert_ne!(csv_a, csv_b, "different seeds must change the measurements");
}

#[test]
fn degenerate_single_point_reports_and_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", &base_config("[8]", 5));
    let out = dir.path().join("out");
    let res = run(&["degeneracy", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    let stdout = String::from_utf8(res.stdout).unwrap();
    assert!(stdout.contains("degenerate fit"), "stdout: {stdout}");
    // The report is still emitted, with no slope recorded.
    let rep: StudyReport =
        serde_json::from_str(&std::fs::read_to_string(out.join("degeneracy.json")).unwrap())
            .unwrap();
    assert!(rep.slope.is_none());
    assert_eq!(rep.points.len(), 1);
}

#[test]
fn missing_or_invalid_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let absent = dir.path().join("absent.json");
    let res = run(&["audit", "--config", absent.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&res.stderr).is_empty());

    let res = run(&["audit"]);
    assert_eq!(res.status.code(), Some(2), "running without --config must fail");

    let bad = write_config(dir.path(), "bad.json", "{\"seed\": 1}");
    let res = run(&["audit", "--config", bad.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn eps1_requires_a_known_family() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", &base_config("[8]", 5));
    let res = run(&["eps1", "--config", cfg.to_str().unwrap(), "--family", "perceptron"]);
    assert_eq!(res.status.code(), Some(2), "clap should reject the value");

    let ok = run(&["eps1", "--config", cfg.to_str().unwrap(), "--family", "dnn"]);
    // Single-point grid: the study runs but the slope verdict fails.
    assert_eq!(ok.status.code(), Some(1));
    let stdout = String::from_utf8(ok.stdout).unwrap();
    assert!(stdout.contains("study eps1_dnn"), "stdout: {stdout}");
}
