use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn spe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spe"))
        .args(args)
        .env("SPE_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn path(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small engine model so every command runs in seconds.
fn write_params(dir: &TempDir) -> PathBuf {
    let p = path(dir, "params.json");
    fs::write(
        &p,
        r#"{"theta2": [0.949, 0.988],
            "theta3": [[0.039, 0.333, 0.590, 0.038], [0.181, 0.757, 0.061, 0.001]],
            "theta1": [0.2, 1.2], "rc": 9.243, "z_max": 50}"#,
    )
    .unwrap();
    p
}

fn simulate(dir: &TempDir, n: &str) -> PathBuf {
    let params = write_params(dir);
    let data = path(dir, "data.jsonl");
    let out = spe(&["simulate", "--params", s(&params), "--n", n, "--t", "20", "--seed", "5", "--out", s(&data), "--resolution", "21"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

#[test]
fn simulate_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, "30");
    let first = fs::read_to_string(&data).unwrap();
    assert_eq!(first.lines().count(), 30);
    let again = simulate(&dir, "30");
    assert_eq!(first, fs::read_to_string(again).unwrap());
    let line: Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(line["z"].as_array().unwrap().len(), 21);
    assert_eq!(line["a"].as_array().unwrap().len(), 20);
}

#[test]
fn simulate_rejects_zero_histories() {
    let dir = TempDir::new().unwrap();
    let params = write_params(&dir);
    let data = path(&dir, "data.jsonl");
    let out = spe(&["simulate", "--params", s(&params), "--n", "0", "--t", "5", "--out", s(&data)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!data.exists());
}

#[test]
fn invalid_params_exit_one() {
    let dir = TempDir::new().unwrap();
    let params = path(&dir, "bad.json");
    fs::write(&params, r#"{"theta2": [1.5, 0.9], "theta3": [[0.25,0.25,0.25,0.25],[0.25,0.25,0.25,0.25]], "theta1": [0,0], "rc": 1}"#).unwrap();
    let out = spe(&["simulate", "--params", s(&params), "--n", "1", "--t", "1", "--out", s(&path(&dir, "d.jsonl"))]);
    assert_eq!(out.status.code(), Some(1));

    fs::write(&params, r#"{"theta2": [0.9, 0.9], "unknown": 1}"#).unwrap();
    let out = spe(&["simulate", "--params", s(&params), "--n", "1", "--t", "1", "--out", s(&path(&dir, "d.jsonl"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_input_exits_two_without_output() {
    let dir = TempDir::new().unwrap();
    let report = path(&dir, "report.json");
    let out = spe(&["estimate", "--data", s(&path(&dir, "nope.jsonl")), "--out", s(&report)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!report.exists());

    let data = simulate(&dir, "5");
    let out = spe(&["estimate", "--data", s(&data), "--out", s(&path(&dir, "missing/report.json"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn estimate_writes_report_with_provenance() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, "40");
    let config = path(&dir, "config.json");
    fs::write(&config, r#"{"resolution": 21, "epsilon": 1e-4}"#).unwrap();
    let report = path(&dir, "report.json");
    let out = spe(&["estimate", "--data", s(&data), "--out", s(&report), "--config", s(&config), "--z-max", "50", "--max-outer", "200"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("log-likelihood"), "{stdout}");
    let json: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["model"], "pomdp");
    assert_eq!(json["input"]["sha256"].as_str().unwrap().len(), 64);
    assert_eq!(json["report"]["config"]["resolution"], 21);
    assert_eq!(json["report"]["theta2"].as_array().unwrap().len(), 8);
    let converged = json["report"]["converged"].as_bool().unwrap();
    assert_eq!(out.status.code(), Some(if converged { 0 } else { 1 }));
}

#[test]
fn non_convergence_still_writes_report() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, "10");
    let report = path(&dir, "report.json");
    let out = spe(&[
        "estimate", "--data", s(&data), "--out", s(&report), "--model", "mdp", "--z-max", "50", "--max-outer", "1", "--epsilon", "1e-12",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let json: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["model"], "mdp");
    assert_eq!(json["report"]["converged"], false);
}

#[test]
fn unknown_config_field_is_rejected() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, "5");
    let config = path(&dir, "config.json");
    fs::write(&config, r#"{"epsilom": 1e-4}"#).unwrap();
    let report = path(&dir, "report.json");
    let out = spe(&["estimate", "--data", s(&data), "--out", s(&report), "--config", s(&config)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!report.exists());
}

#[test]
fn evaluate_and_bellman_solve() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, "10");
    let params = write_params(&dir);
    let eval = path(&dir, "eval.json");
    let out = spe(&["evaluate", "--params", s(&params), "--data", s(&data), "--resolution", "21", "--out", s(&eval)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: Value = serde_json::from_str(&fs::read_to_string(&eval).unwrap()).unwrap();
    let terms = &json["likelihood"];
    let total = terms["total"].as_f64().unwrap();
    assert!(total < 0.0);
    assert!((terms["obs_term"].as_f64().unwrap() + terms["choice_term"].as_f64().unwrap() - total).abs() < 1e-9);

    let q1 = path(&dir, "q1.json");
    let q2 = path(&dir, "q2.json");
    for q in [&q1, &q2] {
        let out = spe(&["bellman-solve", "--params", s(&params), "--resolution", "21", "--out", s(q)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(fs::read(&q1).unwrap(), fs::read(&q2).unwrap());

    let out = spe(&["bellman-solve", "--resolution", "21", "--out", s(&q1)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn identify_probe_reports_witness() {
    let dir = TempDir::new().unwrap();
    let a = write_params(&dir);
    let b = path(&dir, "b.json");
    fs::write(
        &b,
        r#"{"theta2": [0.9, 0.988],
            "theta3": [[0.039, 0.333, 0.590, 0.038], [0.181, 0.757, 0.061, 0.001]],
            "theta1": [0.2, 1.2], "rc": 9.243, "z_max": 50}"#,
    )
    .unwrap();
    let out = spe(&["identify-probe", "--params-a", s(&a), "--params-b", s(&b), "--prior-good", "0.6"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("distinguishable: true"), "{stdout}");

    let out = spe(&["identify-probe", "--params-a", s(&a), "--params-b", s(&a)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("distinguishable: false"));
}

#[test]
fn sensitivity_writes_curve() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, "20");
    let csv = path(&dir, "sweep.csv");
    let report = path(&dir, "sweep.json");
    let params = write_params(&dir);
    let out = spe(&[
        "sensitivity", "--data", s(&data), "--out", s(&csv), "--report", s(&report), "--burn-ins", "1,2", "--candidates", "3",
        "--z-max", "50", "--params", s(&params), "--pairs", "200",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("M,spread"));
    assert_eq!(lines.count(), 2);
    let json: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(json["contraction"]["passed"].as_bool().unwrap());
}
