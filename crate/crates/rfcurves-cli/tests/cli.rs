use std::process::{Command, Output};

fn rfcurves(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rfcurves"))
        .args(args)
        .env_remove("RFCURVES_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn theory_writes_exact_header_and_one_row_per_value() {
    let out = rfcurves(&["theory", "--axis-values", "0.5,1.5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "gamma,lambda,alpha,train_theory,gen_theory,nonzero_theory,beta,q,xi,t,residual,error");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("5.0000000000000000e-1,"));
    assert!(lines[2].starts_with("1.5000000000000000e0,"));
    assert!(!text.contains('\r'));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"axis_values": [0.5], "alpha": 0.1, "seed": 4}"#).unwrap();
    let out = rfcurves(&["theory", "--config", cfg.to_str().unwrap(), "--alpha", "0.01", "--print-config"]);
    assert!(out.status.success());
    let merged: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(merged["alpha"], 0.01);
    assert_eq!(merged["seed"], 4);
    assert_eq!(merged["mode"], "theory");
}

#[test]
fn printed_config_is_accepted_back() {
    let dir = tempfile::tempdir().unwrap();
    let first = rfcurves(&["sparsity", "--sweep-axis", "lambda", "--axis-values", "0.001,0.01", "--gamma", "1.5", "--quad-order", "150", "--print-config"]);
    assert!(first.status.success());
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, stdout(&first)).unwrap();
    let second = rfcurves(&["sparsity", "--config", path.to_str().unwrap(), "--print-config"]);
    assert_eq!(stdout(&first), stdout(&second));
}

#[test]
fn output_file_and_jsonl_format() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.jsonl");
    let out = rfcurves(&["theory", "--axis-values", "0.5", "--format", "jsonl", "--out", path.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(stdout(&out).is_empty());
    let text = std::fs::read_to_string(&path).unwrap();
    let row: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
    assert!(row["gen_theory"].as_f64().unwrap() > 0.1);
    assert!(row["error"].is_null());
}

#[test]
fn row_failure_sets_exit_code_but_keeps_output() {
    let out = rfcurves(&["theory", "--axis-values", "0.5", "--grad-tol", "1e-300"]);
    assert_eq!(out.status.code(), Some(1));
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 2);
    let row = text.lines().nth(1).unwrap();
    assert!(!row.ends_with(','), "error column should be filled: {row}");
}

#[test]
fn invalid_config_is_rejected() {
    let out = rfcurves(&["theory", "--axis-values", "1.0,0.5"]);
    assert_eq!(out.status.code(), Some(2));
    let out = rfcurves(&["theory", "--activation", "relu"]);
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_rfcurves"))
        .args(["theory", "--axis-values", "0.5"])
        .env("RFCURVES_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn compare_is_byte_identical_across_runs_and_dumps_trials() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("trials.jsonl");
    let args = ["compare", "--axis-values", "0.5", "--trials", "3", "--total-size", "240", "--seed", "11", "--threads", "2"];
    let mut with_dump: Vec<&str> = args.to_vec();
    with_dump.extend(["--trial-dump", dump.to_str().unwrap()]);
    let a = rfcurves(&with_dump);
    let b = rfcurves(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let records: Vec<serde_json::Value> = std::fs::read_to_string(&dump)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 3);
    assert_eq!(records[2]["seed"], 13);
    assert_eq!(records[0]["trial"], 0);
}
