use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_orthojoint"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn fail(dir: &Path, args: &[&str]) -> Value {
    let out = run(dir, args);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    serde_json::from_str(err.trim_end()).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let s = ok(d, &["synth", "--seed", "7", "--out", "data.csv"]);
    assert_eq!(s["n_samples"], 200);
    let t = ok(
        d,
        &["train", "--data", "data.csv", "--model", "m.json", "--out", "fit.json", "--per-class-train", "6", "--seed", "7"],
    );
    assert_eq!(t["n_train"], 120);
    assert_eq!(t["n_held_out"], 80);
    let e = ok(d, &["eval", "--data", "data.csv", "--model", "m.json", "--out", "eval.json"]);
    assert_eq!(e["rows"], "held_out");
    assert_eq!(e["n_samples"], 80);
    let doc = read_json(&d.join("eval.json"));
    assert_eq!(doc["result"]["n_samples"], 80);
    let confusion: u64 = doc["result"]["confusion"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|r| r.as_array().unwrap().iter().map(|v| v.as_u64().unwrap()))
        .sum();
    assert_eq!(confusion, 80);
    assert_eq!(doc["config"]["lambda3"], 1e6);
    let fit = read_json(&d.join("fit.json"));
    assert!(!fit["objective_trace"].as_array().unwrap().is_empty());
    let all = ok(d, &["eval", "--data", "data.csv", "--model", "m.json", "--out", "eval_all.json", "--all-rows"]);
    assert_eq!(all["n_samples"], 200);
}

#[test]
fn coupling_does_not_hurt_held_out_error_and_gives_right_angle() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--seed", "7", "--out", "data.csv"]);
    let mut maes = Vec::new();
    for l3 in ["0", "1e6"] {
        let model = format!("m{l3}.json");
        ok(
            d,
            &["train", "--data", "data.csv", "--model", &model, "--out", "fit.json", "--lambda3", l3, "--per-class-train", "6", "--seed", "7"],
        );
        let e = ok(d, &["eval", "--data", "data.csv", "--model", &model, "--out", "e.json"]);
        maes.push(e["age_mae"].as_f64().unwrap());
    }
    assert!(maes[1] <= maes[0], "{maes:?}");
    let a = ok(d, &["angle", "--model", "m1e6.json"]);
    let theta = a["theta_deg"].as_f64().unwrap();
    assert!((theta - 90.0).abs() <= 6.0, "{theta}");
}

#[test]
fn predict_writes_one_row_per_input() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--seed", "1", "--n-per-cell", "3", "--n-classes", "4", "--dim", "3", "--out", "data.csv"]);
    ok(d, &["train", "--data", "data.csv", "--model", "m.json", "--out", "fit.json", "--ordinal", "kdlor", "--kernel", "rbf"]);
    let p = ok(d, &["predict", "--data", "data.csv", "--model", "m.json", "--out", "pred.csv"]);
    assert_eq!(p["n_rows"], 24);
    let text = std::fs::read_to_string(d.join("pred.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "row_id,gender_pred,age_pred");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 24);
    assert!(rows[0].starts_with("0,"));
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--seed", "2", "--n-per-cell", "3", "--n-classes", "3", "--dim", "2", "--out", "data.csv"]);
    std::fs::write(d.join("c.toml"), "lambda1 = 2.5\nlambda3 = 0.0\nordinal = \"kdlor\"\n").unwrap();
    let t = ok(
        d,
        &["train", "--data", "data.csv", "--config", "c.toml", "--model", "m.json", "--out", "f.json", "--lambda3", "10"],
    );
    assert_eq!(t["config"]["lambda1"], 2.5);
    assert_eq!(t["config"]["lambda3"], 10.0);
    assert_eq!(t["config"]["lambda2"], 1.0);
    assert_eq!(t["config"]["ordinal_method"], "kdlor");
    std::fs::write(d.join("bad.toml"), "lambda9 = 1\n").unwrap();
    let e = fail(d, &["train", "--data", "data.csv", "--config", "bad.toml", "--model", "m.json", "--out", "f.json"]);
    assert_eq!(e["error"], "Config");
}

#[test]
fn gridsearch_writes_score_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--seed", "3", "--n-per-cell", "3", "--n-classes", "3", "--dim", "2", "--out", "data.csv"]);
    let g = ok(d, &["gridsearch", "--data", "data.csv", "--out", "s.csv", "--lambda3-grid", "0,1e6", "--folds", "2"]);
    assert_eq!(g["failed_cells"], 0);
    let text = std::fs::read_to_string(d.join("s.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "lambda1,lambda2,lambda3,fold,acc,mae,cos_angle");
    assert_eq!(lines.len(), 5);
}

#[test]
fn failures_are_single_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let e = fail(d, &["train", "--data", "missing.csv", "--model", "m.json", "--out", "f.json"]);
    assert_eq!(e["error"], "Io");
    std::fs::write(d.join("bad.csv"), "f1,gender,age\n1,a,1\nx,b,2\n").unwrap();
    let e = fail(d, &["train", "--data", "bad.csv", "--model", "m.json", "--out", "f.json"]);
    assert_eq!(e["error"], "ParseError");
    assert!(e["message"].as_str().unwrap().contains("row 2"));
    std::fs::write(d.join("tri.csv"), "f1,gender,age\n1,a,1\n2,b,2\n3,c,2\n").unwrap();
    assert_eq!(fail(d, &["train", "--data", "tri.csv", "--model", "m.json", "--out", "f.json"])["error"], "NotBinary");
    assert_eq!(fail(d, &["angle", "--model", "missing.json"])["error"], "Io");
    let e = fail(d, &["frobnicate"]);
    assert_eq!(e["error"], "Usage");
    ok(d, &["synth", "--out", "data.csv", "--n-per-cell", "2", "--n-classes", "3", "--dim", "2"]);
    let e = fail(d, &["train", "--data", "data.csv", "--model", "m.json", "--out", "f.json", "--kernel", "poly"]);
    assert_eq!(e["error"], "InvalidConfig");
    let e = fail(d, &["synth", "--out", "x.csv", "--axis-angle-deg", "0"]);
    assert_eq!(e["error"], "InvalidConfig");
}
