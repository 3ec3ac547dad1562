use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_delta-sim");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("DELTA_SIM_WORKERS").output().expect("binary runs")
}

fn json_of(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn certify_emits_the_certificate_schema() {
    let out = run(&["certify", "--d", "2048", "--acc0", "0.8", "--acc-c", "0.7", "--acc-r", "0.6", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in [
        "kappa",
        "c1_holds",
        "d_star",
        "gamma",
        "horizon",
        "eta",
        "steps",
        "deviation_bound",
        "schema_version",
        "config",
    ] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["config"]["seed"], 7);
}

#[test]
fn certify_is_byte_identical_across_runs() {
    let args = ["certify", "--d", "64", "--alpha0", "0.3", "--alpha-c", "0.2", "--alpha-r", "-0.1", "--seed", "11"];
    assert_eq!(run(&args).stdout, run(&args).stdout);
}

#[test]
fn usage_errors_exit_with_one() {
    let bad = [
        vec!["certify", "--d", "8", "--acc0", "0.8", "--acc-c", "0.6", "--acc-r", "0.7"],
        vec!["certify", "--d", "8", "--alpha0", "0.1", "--acc0", "0.8", "--acc-c", "0.7", "--acc-r", "0.6"],
        vec!["certify", "--d", "8"],
        vec!["frobnicate"],
        vec!["verify", "nothing"],
    ];
    for args in bad {
        assert_eq!(run(&args).status.code(), Some(1), "{args:?}");
    }
    let out = run(&["certify", "--d", "8", "--acc0", "0.8", "--acc-c", "0.6", "--acc-r", "0.7"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no performance delta"));
}

#[test]
fn failed_assertion_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.json");
    let out = run(&["verify", "gradient", "--samples", "20", "--out", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let v = json_of(&p);
    assert_eq!(v["passed"], false);
}

#[test]
fn unwritable_output_fails() {
    let out = run(&[
        "certify",
        "--d",
        "8",
        "--alpha0",
        "0.3",
        "--alpha-c",
        "0.2",
        "--alpha-r",
        "0.1",
        "--out",
        "/nonexistent/dir/x.json",
    ]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn file_config_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"d": 64, "acc0": 80, "acc_c": 70, "acc_r": 60, "percent": true, "seed": 4}"#).unwrap();
    let out = run(&["certify", "--config", cfg.to_str().unwrap(), "--d", "128"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["config"]["d"], serde_json::json!([128]));
    assert_eq!(v["config"]["seed"], 4);

    std::fs::write(&cfg, r#"{"d": 64, "colour": "blue"}"#).unwrap();
    assert_eq!(run(&["certify", "--config", cfg.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn sweep_writes_trial_rows() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("t.csv");
    let out = run(&[
        "sweep",
        "--d",
        "16,32",
        "--alpha0",
        "0.5",
        "--alpha-c",
        "0.4",
        "--alpha-r",
        "0.1",
        "--trials",
        "3",
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 7);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["cells"].as_array().unwrap().len(), 2);
    assert_eq!(v["cells"][0]["n_trials"], 3);
}

#[test]
fn empty_sweep_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("t.csv");
    let out = run(&[
        "sweep",
        "--d",
        "8",
        "--alpha0",
        "0.5",
        "--alpha-c",
        "0.1",
        "--alpha-r",
        "0.4",
        "--trials",
        "3",
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(
        text,
        "trial_id,seed,d,alpha0,alpha_c,alpha_r,kappa,c1_holds,v_delta_norm_sq,gamma,eta,steps,gain_population,gain_sgd,gain_sgd_reversed,improved\n"
    );
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["cells"][0]["notes"].as_str().unwrap().contains("skipped"));
}

#[test]
fn train_writes_a_trace() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("trace.csv");
    let json = dir.path().join("train.json");
    let out = run(&[
        "train",
        "--d",
        "16",
        "--alpha0",
        "0.2",
        "--alpha-c",
        "0.9",
        "--alpha-r",
        "-0.5",
        "--eta",
        "0.01",
        "--steps",
        "50",
        "--record-every",
        "10",
        "--sampler",
        "dense",
        "--csv",
        csv.to_str().unwrap(),
        "--out",
        json.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,cosine,norm");
    let steps: Vec<u64> = lines[1..].iter().map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, vec![0, 10, 20, 30, 40, 50]);
    let v = json_of(&json);
    assert_eq!(v["steps"], 50);
    assert_eq!(v["mode"], "sgd");
}

#[test]
fn population_mode_train() {
    let out = run(&[
        "train",
        "--d",
        "16",
        "--alpha0",
        "0.2",
        "--alpha-c",
        "0.9",
        "--alpha-r",
        "-0.5",
        "--mode",
        "population",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["gain"].as_f64().unwrap() >= v["certificate"]["gamma"].as_f64().unwrap());
}

#[test]
fn environment_worker_override_keeps_output() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let base = [
        "sweep",
        "--d",
        "8,12",
        "--alpha0",
        "0.5",
        "--alpha-c",
        "0.4",
        "--alpha-r",
        "0.1",
        "--trials",
        "6",
        "--reversed",
    ];
    let one = Command::new(BIN)
        .args(base)
        .args(["--csv", a.to_str().unwrap()])
        .env_remove("DELTA_SIM_WORKERS")
        .output()
        .unwrap();
    let many = Command::new(BIN)
        .args(base)
        .args(["--csv", b.to_str().unwrap()])
        .env("DELTA_SIM_WORKERS", "3")
        .output()
        .unwrap();
    assert_eq!(one.status.code(), Some(0));
    assert_eq!(many.status.code(), Some(0));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(one.stdout, many.stdout);
}
