use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lgpt-lab"))
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("spawn lgpt-lab")
}

fn code(args: &[&str]) -> i32 {
    lab(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A deliberately tiny LM so these tests stay fast.
fn tiny_lm(dir: &Path) -> std::path::PathBuf {
    let lm = dir.join("lm.bin");
    let report = dir.join("lm.json");
    assert_eq!(
        code(&["pretrain-lm", "--out", s(&lm), "--docs", "40", "--max-steps", "5", "--report", s(&report)]),
        0
    );
    lm
}

#[test]
fn gen_data_writes_one_line_per_example() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.jsonl");
    assert_eq!(code(&["gen-data", "--task", "stance", "--n", "25", "--out", s(&out)]), 0);
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 25);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["nodes"].is_array() && v["edges"].is_array());
    }
}

#[test]
fn invalid_input_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.jsonl");
    assert_eq!(code(&["gen-data", "--task", "nope", "--n", "5", "--out", s(&out)]), 1);
    assert_eq!(code(&["gen-data", "--task", "multifact", "--k", "1", "--n", "5", "--out", s(&out)]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["ablate", "--preset", "table9", "--data", "x", "--lm", "y", "--out", "z"]), 1);

    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{not json}\n").unwrap();
    let lm = tiny_lm(dir.path());
    let report = dir.path().join("r.json");
    let out = lab(&["train", "--data", s(&bad), "--lm", s(&lm), "--out", s(&report)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    assert!(!report.exists());

    let config = dir.path().join("c.json");
    fs::write(&config, r#"{"heads": 3}"#).unwrap();
    assert_eq!(code(&["gradcheck", "--config", s(&config)]), 1);
    fs::write(&config, r#"{"colour": "red"}"#).unwrap();
    assert_eq!(code(&["gradcheck", "--config", s(&config)]), 1);
}

#[test]
fn missing_files_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    assert_eq!(code(&["gen-data", "--task", "attribute_lookup", "--n", "10", "--out", s(&data)]), 0);
    let missing = dir.path().join("absent.bin");
    let out = dir.path().join("r.json");
    assert_eq!(code(&["train", "--data", s(&data), "--lm", s(&missing), "--out", s(&out)]), 2);
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
}

#[test]
fn gradcheck_reports_every_group() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g.json");
    let config = dir.path().join("c.json");
    fs::write(&config, r#"{"fusion": "early_late"}"#).unwrap();
    assert_eq!(code(&["gradcheck", "--config", s(&config), "--out", s(&out)]), 0);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let groups: Vec<&str> = v.as_array().unwrap().iter().map(|g| g["group"].as_str().unwrap()).collect();
    assert_eq!(groups, ["gnn_query", "gnn_graph", "lgpt", "gnn_pool", "late_fusion", "proj"]);
    assert!(v.as_array().unwrap().iter().all(|g| g["passed"] == true));
}

#[test]
fn train_eval_and_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let lm = tiny_lm(p);
    let data = p.join("d.jsonl");
    assert_eq!(code(&["gen-data", "--task", "attribute_lookup", "--n", "30", "--seed", "3", "--out", s(&data)]), 0);
    let config = p.join("c.json");
    fs::write(&config, r#"{"max_steps": 6, "eval_every": 3, "readout": "mean"}"#).unwrap();
    let report = p.join("r.json");
    let model = p.join("m.json");
    assert_eq!(
        code(&["train", "--config", s(&config), "--data", s(&data), "--lm", s(&lm), "--out", s(&report), "--model", s(&model), "--seed", "4"]),
        0
    );
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["steps"], 6);
    assert_eq!(r["config"]["seed"], 4);
    assert_eq!(r["digests_equal"], true);

    let eval = p.join("e.json");
    assert_eq!(code(&["eval", "--model", s(&model), "--data", s(&data), "--lm", s(&lm), "--out", s(&eval)]), 0);
    let e: serde_json::Value = serde_json::from_str(&fs::read_to_string(&eval).unwrap()).unwrap();
    assert_eq!(e["split"], "test");
    assert_eq!(e["accuracy"], r["test_metric"]);

    let out = lab(&["report", s(&report), "--format", "csv"]);
    assert!(out.status.success());
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.starts_with("task,arm,readout,fusion,n_tokens,seeds,failures,mean,std,delta_pct"), "{csv}");
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn ablate_renders_every_arm() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let lm = tiny_lm(p);
    let data = p.join("d.jsonl");
    assert_eq!(code(&["gen-data", "--task", "attribute_lookup", "--n", "20", "--out", s(&data)]), 0);
    let config = p.join("c.json");
    fs::write(&config, r#"{"max_steps": 2, "eval_every": 2, "eval_limit": 2}"#).unwrap();
    let table = p.join("t.md");
    let runs = p.join("runs.json");
    let out = lab(&[
        "ablate", "--preset", "table3", "--config", s(&config), "--data", s(&data), "--lm", s(&lm),
        "--seeds", "1,2", "--out", s(&table), "--runs", s(&runs),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let md = fs::read_to_string(&table).unwrap();
    for arm in ["| mean | none |", "| mean | early |", "| lgpt | none |", "| lgpt | early |"] {
        assert!(md.contains(arm), "{md}");
    }
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&runs).unwrap()).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 8);

    let csv = p.join("t.csv");
    assert_eq!(code(&["report", s(&runs), "--format", "csv", "--out", s(&csv)]), 0);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 5);
}
