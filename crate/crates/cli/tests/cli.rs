use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_spinglass"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn setup() -> TempDir {
    let d = TempDir::new().unwrap();
    write(d.path(), "mixed.json", r#"{"coeffs": {"2": 0.5, "3": 0.5}}"#);
    write(d.path(), "p3.json", r#"{"coeffs": {"3": 1.0}}"#);
    write(d.path(), "p4.json", r#"{"coeffs": {"4": 1.0}}"#);
    write(d.path(), "m24.json", r#"{"coeffs": {"2": 0.5, "4": 0.5}}"#);
    d
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn csv_rows(out: &Output) -> Vec<Vec<String>> {
    String::from_utf8_lossy(&out.stdout).lines().map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn parisi_small_beta_is_replica_symmetric() {
    let d = setup();
    let out = run(d.path(), &["parisi", "--mixture", "mixed.json", "--beta", "0.1"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["cs"]["k"], 0);
    let val = v["cs"]["value"].as_f64().unwrap();
    assert!((val - 0.01 / 2.0).abs() < 1e-12, "{val}");
}

#[test]
fn parisi_zero_temperature_pure_three_spin() {
    let d = setup();
    let out = run(d.path(), &["parisi", "--mixture", "p3.json", "--zero-temp"]);
    assert_eq!(out.status.code(), Some(0));
    let e = json(&out)["zt"]["e_star"].as_f64().unwrap();
    assert!((e - 1.657).abs() < 1e-3, "{e}");
}

#[test]
fn malformed_mixture_exits_one() {
    let d = setup();
    write(d.path(), "bad.json", "{\"coeffs\": {2: 1}");
    let out = run(d.path(), &["parisi", "--mixture", "bad.json", "--beta", "0.1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("malformed mixture"));
    let out = run(d.path(), &["parisi", "--mixture", "missing.json", "--beta", "0.1"]);
    assert_eq!(out.status.code(), Some(1));
    write(d.path(), "neg.json", r#"{"coeffs": {"2": -1.0}}"#);
    let out = run(d.path(), &["parisi", "--mixture", "neg.json", "--beta", "0.1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn solver_failure_exits_two() {
    let d = setup();
    let out = run(d.path(), &["parisi", "--mixture", "p3.json", "--beta", "3", "--k-max", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ground_state_failure_keeps_partial_csv() {
    let d = setup();
    let out = run(d.path(), &["landscape", "--mixture", "m24.json", "--gs", "--qgrid", "0.2:1:0.2", "--k-max", "0", "--out", "gs.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!d.path().join("gs.csv").exists());
    let partial = std::fs::read_to_string(d.path().join("gs.csv.partial")).unwrap();
    assert!(partial.starts_with("q,e_star,r_star,certified"));
}

#[test]
fn ground_state_curve_csv() {
    let d = setup();
    let out = run(d.path(), &["landscape", "--mixture", "p3.json", "--gs", "--qgrid", "0.5:1:0.25"]);
    assert_eq!(out.status.code(), Some(0));
    let rows = csv_rows(&out);
    assert_eq!(rows.len(), 4);
    // Pure 3-spin: E*(q) = q^{3/2} E*(1) and R* = 3 E*/q.
    let e1: f64 = rows[3][1].parse().unwrap();
    let e05: f64 = rows[1][1].parse().unwrap();
    assert!((e05 - 0.5f64.powf(1.5) * e1).abs() < 1e-6);
    let r05: f64 = rows[1][2].parse().unwrap();
    assert!((r05 - 3.0 * e05 / 0.5).abs() < 1e-5);
}

#[test]
fn theta_grid_and_identities() {
    let d = setup();
    let out = run(d.path(), &["landscape", "--mixture", "mixed.json", "--theta", "--grid", "5"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(csv_rows(&out).len(), 1 + 25);
    let out = run(d.path(), &["landscape", "--mixture", "mixed.json", "--identities", "--beta", "2.0"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert!(v["fprime_identity"]["dev"].as_f64().unwrap() < 1e-3);
    assert!(v["identity_esrs"]["rows"].is_array());
    let out = run(d.path(), &["landscape", "--mixture", "mixed.json", "--theta", "--gs"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn fp_high_sweep_contains_free_energy_at_zero() {
    let d = setup();
    let out = run(d.path(), &["fp", "--mixture", "mixed.json", "--beta", "0.5", "--beta-prime", "0.7", "--r-grid", "-0.5:0.5:0.25"]);
    assert_eq!(out.status.code(), Some(0));
    let rows = csv_rows(&out);
    assert_eq!(rows.len(), 6);
    let zero = rows.iter().find(|r| r[0] == "0").unwrap();
    assert_eq!(zero[1], "high");
    let v: f64 = zero[2].parse().unwrap();
    assert!((v - 0.49 / 2.0).abs() < 1e-9);
}

#[test]
fn fp_low_sweep_is_finite() {
    let d = setup();
    let out = run(d.path(), &["fp", "--mixture", "mixed.json", "--beta", "5", "--beta-prime", "1", "--r-grid", "-0.6:0.6:0.6"]);
    assert_eq!(out.status.code(), Some(0));
    for row in &csv_rows(&out)[1..] {
        assert_eq!(row[1], "low");
        assert!(row[2].parse::<f64>().unwrap().is_finite());
        let vol: f64 = row[6].parse().unwrap();
        assert!(vol <= 0.0);
    }
}

#[test]
fn fp_errors_become_nan_rows() {
    let d = setup();
    let out = run(d.path(), &["fp", "--mixture", "mixed.json", "--beta", "0.5", "--both-regimes", "--r-grid", "0:0.2:0.2"]);
    assert_ne!(out.status.code(), Some(0));
    let rows = csv_rows(&out);
    assert_eq!(rows.len(), 5);
    let low: Vec<_> = rows.iter().filter(|r| r[1] == "low").collect();
    assert_eq!(low.len(), 2);
    assert!(low.iter().all(|r| r[2] == "NaN"));
    assert!(rows.iter().filter(|r| r[1] == "high").all(|r| r[2] != "NaN"));
}

#[test]
fn capacity_exits_three() {
    let d = setup();
    let out = run(d.path(), &["mc", "gibbs", "--mixture", "p4.json", "--beta", "0", "--N", "70"]);
    assert_eq!(out.status.code(), Some(3));
    let out = run(d.path(), &["mc", "complexity", "--mixture", "mixed.json", "--N", "80"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn gibbs_at_zero_beta_and_dump() {
    let d = setup();
    let args = ["mc", "gibbs", "--mixture", "mixed.json", "--beta", "0", "--N", "36", "--samples", "60", "--burn-in", "300", "--thin", "5", "--dump", "s.bin", "--seed", "3"];
    let out = run(d.path(), &args);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    let mean = v["overlap"]["mean"].as_f64().unwrap();
    let std = v["overlap"]["std"].as_f64().unwrap();
    assert!(mean.abs() < 0.06, "{mean}");
    assert!((std - 1.0 / 6.0).abs() < 0.05, "{std}");
    let dump = std::fs::read(d.path().join("s.bin")).unwrap();
    assert_eq!(&dump[..4], b"SGMC");
    assert_eq!(u64::from_le_bytes(dump[8..16].try_into().unwrap()), 36);
    assert_eq!(dump.len(), 16 + 60 * 36 * 8);
    // Same config, same bytes.
    let again = run(d.path(), &args);
    assert_eq!(out.stdout, again.stdout);
    assert_eq!(std::fs::read(d.path().join("s.bin")).unwrap(), dump);
}

#[test]
fn complexity_runs_and_is_deterministic() {
    let d = setup();
    let args = ["mc", "complexity", "--mixture", "mixed.json", "--N", "10", "--fields", "4", "--restarts", "10", "--format", "csv"];
    let a = run(d.path(), &args);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(csv_rows(&a).len(), 1 + 100);
    let b = run(d.path(), &args);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn validate_conditioning_reports_kernels() {
    let d = setup();
    let out = run(d.path(), &["mc", "validate-conditioning", "--samples", "20000"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["kernels"].as_array().unwrap().len(), 5);
    assert!(String::from_utf8_lossy(&out.stderr).contains("level m=1"));
}

#[test]
fn run_config_round_trips_and_reproduces() {
    let d = setup();
    let flags = ["fp", "--mixture", "mixed.json", "--beta", "0.5", "--beta-prime", "0.7", "--r-grid", "0:0.4:0.2", "--seed", "5"];
    let mut emit = flags.to_vec();
    emit.push("--emit-config");
    let first = run(d.path(), &emit);
    assert_eq!(first.status.code(), Some(0));
    write(d.path(), "run.json", std::str::from_utf8(&first.stdout).unwrap());
    let second = run(d.path(), &["fp", "--config", "run.json", "--emit-config"]);
    assert_eq!(first.stdout, second.stdout);
    let from_flags = run(d.path(), &flags);
    let from_file = run(d.path(), &["fp", "--config", "run.json"]);
    assert_eq!(from_flags.status.code(), Some(0));
    assert_eq!(from_flags.stdout, from_file.stdout);
    // A flag overrides the file.
    let over = run(d.path(), &["fp", "--config", "run.json", "--beta-prime", "0.9", "--emit-config"]);
    assert_eq!(json(&over)["params"]["beta_prime"], 0.9);
    // A config for another command is rejected.
    let wrong = run(d.path(), &["parisi", "--config", "run.json"]);
    assert_eq!(wrong.status.code(), Some(1));
}

#[test]
fn out_flag_writes_file() {
    let d = setup();
    let out = run(d.path(), &["parisi", "--mixture", "mixed.json", "--beta", "0.2", "--format", "csv", "--out", "r.csv"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stdout.is_empty());
    let text = std::fs::read_to_string(d.path().join("r.csv")).unwrap();
    assert!(text.starts_with("solver,quantity,value\ncs,beta,0.2\n"));
}
