use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::Value;
use tempfile::TempDir;

fn introspect(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_introspect")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_dataset(dir: &TempDir) -> std::path::PathBuf {
    let data = dir.path().join("small.jsonl");
    let out = introspect(&["gen-synth", "--out", p(&data), "--episodes", "40", "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = introspect(&["gen-synth", "--out", "x.jsonl", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_cleanly() {
    let out = introspect(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("evaluate"));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = TempDir::new().unwrap();
    let out = introspect(&[
        "calibrate-cp",
        "--data",
        p(&dir.path().join("absent.jsonl")),
        "--out",
        p(&dir.path().join("t.json")),
        "--score",
        "entropy",
        "--regime",
        "strong",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.jsonl"));
}

#[test]
fn more_folds_than_episodes_is_rejected() {
    let dir = TempDir::new().unwrap();
    let data = small_dataset(&dir);
    let out = introspect(&[
        "evaluate",
        "--data",
        p(&data),
        "--method",
        "cp",
        "--folds",
        "41",
        "--score",
        "entropy",
        "--regime",
        "strong",
        "--out",
        p(&dir.path().join("r.json")),
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("41"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"episodes": 10, "not_an_option": 1}"#).unwrap();
    let out = introspect(&["gen-synth", "--out", p(&dir.path().join("d.jsonl")), "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not_an_option"));
}

#[test]
fn flags_override_config_values() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"episodes": 10, "seed": 5}"#).unwrap();
    let from_file = dir.path().join("a.jsonl");
    let overridden = dir.path().join("b.jsonl");
    assert!(introspect(&["gen-synth", "--out", p(&from_file), "--config", p(&cfg)]).status.success());
    assert!(introspect(&["gen-synth", "--out", p(&overridden), "--config", p(&cfg), "--episodes", "12"])
        .status
        .success());
    assert_eq!(fs::read_to_string(&from_file).unwrap().lines().count(), 10);
    assert_eq!(fs::read_to_string(&overridden).unwrap().lines().count(), 12);

    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("b.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "gen-synth");
    assert_eq!(manifest["seed"], 5);
}

#[test]
fn pipeline_train_calibrate_evaluate_monitor() {
    let dir = TempDir::new().unwrap();
    let data = small_dataset(&dir);

    let summary = introspect(&["extract-features", "--data", p(&data)]);
    assert!(summary.status.success());
    let summary: Value = serde_json::from_slice(&summary.stdout).unwrap();
    assert!(summary.is_object());

    let ckpt = dir.path().join("weak.ckpt");
    let out = introspect(&[
        "train", "--mode", "weak", "--data", p(&data), "--out", p(&ckpt), "--ff-dim", "16", "--max-tokens", "8",
        "--max-epochs", "2", "--seed", "1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("weak.ckpt.manifest.json").exists());

    let threshold = dir.path().join("tau.json");
    let out = introspect(&["calibrate-cp", "--data", p(&data), "--out", p(&threshold), "--score", "perplexity", "--regime", "weak"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let report = dir.path().join("report.json");
    let out = introspect(&[
        "evaluate", "--data", p(&data), "--method", "cp", "--score", "entropy", "--regime", "strong", "--folds", "4", "--out", p(&report), "--seed", "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(report["folds"].as_array().unwrap().len(), 4);
    assert_eq!(report["k"], 4);
    assert!(report["aggregate"].is_object());

    for (flag, path) in [("--checkpoint", &ckpt), ("--cp-threshold", &threshold)] {
        let mut child = Command::new(env!("CARGO_BIN_EXE_introspect"))
            .args(["monitor", flag, p(path)])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .unwrap();
        let tokens = format!(
            r#"[{{"kind":"full","vocab_size":12,"probs":{:?},"logits":{:?},"chosen_index":0}}]"#,
            [1.0 / 12.0; 12],
            [0.0; 12]
        );
        let session = format!(
            "{{\"type\":\"hello\",\"version\":1}}\n{{\"type\":\"step\",\"step_index\":0,\"tokens\":{tokens}}}\nnot json\n{{\"type\":\"bye\"}}\n"
        );
        child.stdin.take().unwrap().write_all(session.as_bytes()).unwrap();
        let out = child.wait_with_output().unwrap();
        assert!(out.status.success());
        let replies: Vec<Value> = String::from_utf8(out.stdout)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        let kinds: Vec<&str> = replies.iter().map(|r| r["type"].as_str().unwrap()).collect();
        assert_eq!(kinds, ["hello_ack", "decision", "error", "bye_ack"]);
    }
}
