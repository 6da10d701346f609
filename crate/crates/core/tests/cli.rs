use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use verispec::model::{save_weights, Model, ModelConfig};

const BIN: &str = env!("CARGO_BIN_EXE_verispec");

/// A small run: tiny model, two short prompts, 16 new tokens.
fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.json");
    let text = format!(
        r#"{{
  "model": {{"init": {{"seed": 1, "config": {tiny}}}}},
  "workload": {{"kind": {{"kind": "repeated_segments", "segment_len": 6, "repeats": 3}}, "prompt_len": 40, "n_prompts": 2, "seed": 3}},
  "decode": {{"gamma": 3, "max_new_tokens": 16}},
  "hardware": "toy",
  "sweep": {{"gamma_large": 4}},
  "selfcheck": {{"seeds": 2, "gammas": [2], "max_new_tokens": 12}}
}}"#,
        tiny = serde_json::to_string(&ModelConfig::tiny()).unwrap()
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().unwrap()
}

fn csv_rows(path: &Path) -> usize {
    csv::Reader::from_path(path).unwrap().records().count()
}

#[test]
fn generate_writes_outputs_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    for out in ["a", "b"] {
        let o = run(dir.path(), &["generate", "--config", cfg, "--out", out, "--mode", "sample", "--seed", "4"]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).starts_with("generated 16 tokens"));
    }
    for f in ["generation.json", "stats.jsonl"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        assert_eq!(a, std::fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
    let mut entries: Vec<String> =
        std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    entries.sort();
    assert_eq!(entries, ["a", "b", "run.json"]);
}

#[test]
fn loads_saved_weights() {
    let dir = tempfile::tempdir().unwrap();
    let m = Model::init(ModelConfig::tiny(), 8).unwrap();
    let w = dir.path().join("w.bin");
    save_weights(&w, m.config(), m.weights()).unwrap();
    let cfg = dir.path().join("load.json");
    let text = format!(
        r#"{{"model": {{"load": {{"path": {}}}}}, "workload": {{"kind": {{"kind": "random_tokens"}}, "prompt_len": 40, "n_prompts": 1}}, "decode": {{"max_new_tokens": 8}}}}"#,
        serde_json::to_string(&w).unwrap()
    );
    std::fs::write(&cfg, text).unwrap();
    let o = run(dir.path(), &["generate", "--config", cfg.to_str().unwrap(), "--out", "o"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("o/generation.json").is_file());
}

#[test]
fn missing_weights_exit_2_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"model": {"load": {"path": "no/such/weights.bin"}}}"#).unwrap();
    let o = run(dir.path(), &["generate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no/such/weights.bin"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["bench", "--selector", "nope"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["bench", "--gamma", "0"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["bench", "--config", "missing.json"]).status.code(), Some(2));
    std::fs::write(dir.path().join("typo.json"), r#"{"decod": {}}"#).unwrap();
    assert_eq!(run(dir.path(), &["bench", "--config", "typo.json"]).status.code(), Some(2));
}

#[test]
fn sweep_grid_rows_and_reruns_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    for out in ["s1", "s2"] {
        let o = run(dir.path(), &["sweep", "--config", cfg, "--out", out, "--ratio", "0.25,1.0", "--gamma", "2,3"]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("chosen: ratio"));
    }
    assert_eq!(csv_rows(&dir.path().join("s1/grid.csv")), 4);
    for f in ["grid.csv", "iterations.csv", "sweep.json"] {
        let a = std::fs::read(dir.path().join("s1").join(f)).unwrap();
        assert_eq!(a, std::fs::read(dir.path().join("s2").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn compare_two_selectors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = run(dir.path(), &["compare", "--config", cfg.to_str().unwrap(), "--out", "c", "--selector", "window,collect2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(csv_rows(&dir.path().join("c/compare.csv")), 2);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("window") && stdout.contains("collect2"));
}

#[test]
fn bench_writes_iteration_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = run(dir.path(), &["bench", "--config", cfg.to_str().unwrap(), "--out", "b", "--selector", "quest"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(csv_rows(&dir.path().join("b/iterations.csv")) > 0);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("b/bench.json")).unwrap()).unwrap();
    assert!(summary["iterations"].as_u64().unwrap() > 0);
}

#[test]
fn selfcheck_pass_and_negative_control() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let ok = run(dir.path(), &["selfcheck", "--config", cfg, "--out", "ok"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stdout));
    let table = String::from_utf8_lossy(&ok.stdout);
    for name in ["window", "quest", "last-accepted", "all-draft", "collect2", "collect2-weights"] {
        let line = table.lines().find(|l| l.split_whitespace().next() == Some(name)).unwrap();
        let cols: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(cols[1..], ["2", "2"], "{line}");
    }
    let bad = run(dir.path(), &["selfcheck", "--config", cfg, "--out", "bad", "--inject-fault"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("first divergence at generated token"));
}
