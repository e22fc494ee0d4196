//! Flag handling and exit-code contract of the `mmh` binary.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::Path;
use std::process::{Command, Output};

fn mmh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmh"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("exit code")
}

fn setup_fixture(dir: &Path, steps: usize) -> (String, String) {
    let config = common::copy_task_fixture(dir, 4, steps, 5);
    let config_str = config.to_string_lossy().into_owned();
    let out = mmh(&["setup", "--modality", "text2text", "--config_path", &config_str]);
    assert_eq!(code(&out), 0, "setup failed: {}", stderr(&out));
    let artifacts = stdout(&out).trim().to_string();
    assert!(Path::new(&artifacts).is_dir(), "setup must print the artifacts dir");
    (config_str, artifacts)
}

#[test]
fn help_exits_zero() {
    let out = mmh(&["--help"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("setup"));
}

#[test]
fn missing_config_path_is_a_usage_error() {
    let out = mmh(&["setup", "--modality", "text2text"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("Usage"), "stderr: {}", stderr(&out));
}

#[test]
fn unknown_modality_lists_registered_ones() {
    let tmp = tempfile::tempdir().unwrap();
    let config = common::copy_task_fixture(tmp.path(), 4, 1, 5);
    let out = mmh(&[
        "setup",
        "--modality",
        "pose3text",
        "--config_path",
        &config.to_string_lossy(),
    ]);
    assert_eq!(code(&out), 1);
    let err = stderr(&out);
    assert!(err.contains("pose2text") && err.contains("mixed"), "stderr: {err}");
}

#[test]
fn unknown_task_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, artifacts) = setup_fixture(tmp.path(), 1);
    let out = mmh(&["train", "--task", "triangulate", "--output_path", &artifacts]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("seq2seq"));
}

#[test]
fn validation_failures_exit_one_with_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let records = vec![mmh_core::metadata::SampleRecord {
        encoder_prompt: "p".into(),
        output: "o".into(),
        signal: "x".into(),
        signal_start: 514,
        signal_end: 404,
        ..Default::default()
    }];
    let train = common::write_split(dir, "train.tsv", mmh_core::metadata::Split::Train, records);
    let config_text = format!(
        "model:\ndata:\n  train_metadata_file: {}\nprocessor:\ntraining:\n  output_dir: {}\n",
        train.display(),
        dir.join("run").display()
    );
    let config = dir.join("config.yaml");
    std::fs::write(&config, config_text).unwrap();
    let out = mmh(&[
        "setup",
        "--modality",
        "text2text",
        "--config_path",
        &config.to_string_lossy(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("row 0"), "stderr: {}", stderr(&out));
}

#[test]
fn max_steps_override_shortens_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, artifacts) = setup_fixture(tmp.path(), 100);
    let out = mmh(&[
        "train",
        "--task",
        "seq2seq",
        "--output_path",
        &artifacts,
        "--max_steps",
        "5",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let log = std::fs::read_to_string(Path::new(&artifacts).join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 5);
}

#[test]
fn generate_prints_the_metric_line() {
    let tmp = tempfile::tempdir().unwrap();
    let (config, artifacts) = setup_fixture(tmp.path(), 30);
    let out = mmh(&["train", "--task", "seq2seq", "--output_path", &artifacts]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    let out = mmh(&[
        "generate",
        "--task",
        "seq2seq",
        "--metric_name",
        "bleu",
        "--config_path",
        &config,
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let line = stdout(&out);
    let line = line.trim();
    // Machine-parseable `<metric>: <score with 2 decimals>`.
    let (name, score) = line.split_once(": ").expect("metric line");
    assert_eq!(name, "bleu");
    assert!(score.parse::<f64>().is_ok(), "score: {score}");
    assert_eq!(score.split('.').nth(1).map(str::len), Some(2));

    // The predictions file exists and parses.
    let dump = Path::new(&artifacts).join("predictions_test.txt");
    assert!(dump.exists());
    mmh_core::metrics::read_predictions(&dump).unwrap();
}

#[test]
fn generate_accepts_the_artifacts_dir_directly() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, artifacts) = setup_fixture(tmp.path(), 2);
    mmh(&["train", "--task", "seq2seq", "--output_path", &artifacts]);
    let out = mmh(&[
        "generate",
        "--task",
        "seq2seq",
        "--metric_name",
        "chrf",
        "--config_path",
        &artifacts,
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).starts_with("chrf: "));
}

#[test]
fn unsupported_metric_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let (config, artifacts) = setup_fixture(tmp.path(), 1);
    mmh(&["train", "--task", "seq2seq", "--output_path", &artifacts]);
    let out = mmh(&[
        "generate",
        "--task",
        "seq2seq",
        "--metric_name",
        "comet",
        "--config_path",
        &config,
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("comet"));
}

#[test]
fn malformed_override_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, artifacts) = setup_fixture(tmp.path(), 1);
    let out = mmh(&[
        "train",
        "--task",
        "seq2seq",
        "--output_path",
        &artifacts,
        "--max_steps",
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("missing a value"));
}
