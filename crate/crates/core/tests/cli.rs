// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str =
    "[corpus]\nn_train_prefix = 40\nn_train_classifier = 60\nn_dev = 20\nn_test = 20\n";

fn ctxdetox(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxdetox"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn error_record(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).expect("error record is JSON")
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn unknown_target_fails_with_a_config_record() {
    let out = ctxdetox(&["train", "nonsense"]);
    assert!(!out.status.success());
    let rec = error_record(&out);
    assert_eq!(rec["error"], "config");
    assert!(rec["message"].as_str().unwrap().contains("nonsense"));
}

#[test]
fn missing_corpus_is_reported_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = ctxdetox(&["--run-dir", run.to_str().unwrap(), "train", "base"]);
    assert!(!out.status.success());
    assert_eq!(error_record(&out)["error"], "missing_artifact");
}

#[test]
fn corpus_is_not_overwritten_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let run = dir.path().join("run");
    let run = run.to_str().unwrap();

    let first = ctxdetox(&["--config", &config, "--run-dir", run, "corpus"]);
    assert!(
        first.status.success(),
        "{}",
        String::from_utf8_lossy(&first.stderr)
    );
    let before = std::fs::read(dir.path().join("run/corpus/test.jsonl")).unwrap();

    // Same config: a no-op. Different seed: refused.
    assert!(ctxdetox(&["--config", &config, "--run-dir", run, "corpus"])
        .status
        .success());
    let clash = ctxdetox(&[
        "--config",
        &config,
        "--run-dir",
        run,
        "--seed",
        "7",
        "corpus",
    ]);
    assert!(!clash.status.success());
    assert_eq!(error_record(&clash)["error"], "already_exists");
    assert_eq!(
        std::fs::read(dir.path().join("run/corpus/test.jsonl")).unwrap(),
        before
    );

    let forced = ctxdetox(&[
        "--config",
        &config,
        "--run-dir",
        run,
        "--seed",
        "7",
        "--force",
        "corpus",
    ]);
    assert!(forced.status.success());
    assert_ne!(
        std::fs::read(dir.path().join("run/corpus/test.jsonl")).unwrap(),
        before
    );
}

#[test]
fn config_verb_prints_resolved_toml() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "seed = 9\n");
    let out = ctxdetox(&["--config", &config, "config"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let parsed = ctxdetox::app::RunConfig::from_toml(&text).unwrap();
    assert_eq!(parsed.seed, 9);
    assert_eq!(parsed.corpus.seed, 9);
    assert_eq!(parsed.lm.vocab, 120);
}

#[test]
fn malformed_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "[lm]\nhidden = \"wide\"\n");
    let out = ctxdetox(&["--config", &config, "config"]);
    assert!(!out.status.success());
    assert_eq!(error_record(&out)["error"], "config");
}
