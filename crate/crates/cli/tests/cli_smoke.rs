//! End-to-end checks of the `ssounds` binary: the full pipeline on a tiny
//! corpus, idempotent evaluation, learning-rate overrides, and argument
//! rejection. Everything runs the real executable through `std::process`.

use std::path::Path;
use std::process::{Command, Output};

use ssounds_core::archive::EmbeddingArchive;
use ssounds_core::export::ConditioningFile;

fn ssounds(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssounds"))
        .env_remove("SSOUNDS_CONFIG")
        .arg("--quiet")
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("spawning the ssounds binary")
}

fn run_ok(out: &Path, args: &[&str]) -> Output {
    let output = ssounds(out, args);
    assert!(
        output.status.success(),
        "ssounds {args:?} failed with {:?}:\n{}",
        output.status.code(),
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

#[test]
fn pipeline_runs_end_to_end_and_eval_is_idempotent() {
    let dir = tempfile::tempdir().expect("tempdir");
    let corpus = dir.path().join("corpus");
    let run = dir.path().join("run");
    let eval_a = dir.path().join("eval-a");
    let eval_b = dir.path().join("eval-b");

    run_ok(
        &corpus,
        &["--seed", "41", "synth-data", "--classes", "3", "--per-class", "4"],
    );
    assert!(corpus.join("manifest.json").exists());

    run_ok(
        &run,
        &["--seed", "41", "train", "--corpus", corpus.to_str().unwrap(), "--max-epochs", "2"],
    );
    for artifact in ["model.ssck", "metrics.ndjson", "run-config.toml", "train-summary.json"] {
        assert!(run.join(artifact).exists(), "train should write {artifact}");
    }

    let checkpoint = run.join("model.ssck");
    let eval_args = [
        "eval",
        "--corpus",
        corpus.to_str().unwrap(),
        "--checkpoint",
        checkpoint.to_str().unwrap(),
    ];
    run_ok(&eval_a, &eval_args);
    run_ok(&eval_b, &eval_args);
    for artifact in ["retrieval.json", "retrieval.txt", "probes.json", "probes.txt"] {
        assert!(eval_a.join(artifact).exists(), "eval should write {artifact}");
        let a = std::fs::read(eval_a.join(artifact)).expect("first eval output");
        let b = std::fs::read(eval_b.join(artifact)).expect("second eval output");
        assert_eq!(a, b, "repeated eval should reproduce {artifact} byte for byte");
    }

    run_ok(&run, &["embed", "--corpus", corpus.to_str().unwrap()]);
    let archive = EmbeddingArchive::read(&run.join("embeddings.ssea")).expect("archive parses");
    // 12 audio clips plus one text and one vision record per class.
    assert_eq!(archive.len(), 12 + 3 + 3);

    run_ok(
        &run,
        &[
            "export-conditioning",
            "--corpus",
            corpus.to_str().unwrap(),
            "--checkpoint",
            checkpoint.to_str().unwrap(),
        ],
    );
    let conditioning =
        ConditioningFile::read(&run.join("conditioning.sscp")).expect("conditioning parses");
    assert_eq!(conditioning.len(), 12);
}

#[test]
fn zeroed_learning_rates_leave_validation_loss_flat() {
    let dir = tempfile::tempdir().expect("tempdir");
    let corpus = dir.path().join("corpus");
    let run = dir.path().join("run");

    run_ok(&corpus, &["--seed", "17", "synth-data", "--classes", "3", "--per-class", "4"]);
    run_ok(
        &run,
        &[
            "--seed",
            "17",
            "train",
            "--corpus",
            corpus.to_str().unwrap(),
            "--max-epochs",
            "3",
            "--ext",
            "false",
            "--lr-text",
            "0",
            "--lr-vision",
            "0",
        ],
    );

    let metrics = std::fs::read_to_string(run.join("metrics.ndjson")).expect("metrics file");
    let val_losses: Vec<f64> = metrics
        .lines()
        .map(|line| {
            let record: serde_json::Value = serde_json::from_str(line).expect("metrics line");
            record["val_loss"].as_f64().expect("val_loss field")
        })
        .collect();
    assert_eq!(val_losses.len(), 3);
    for v in &val_losses[1..] {
        assert_eq!(
            v.to_bits(),
            val_losses[0].to_bits(),
            "frozen parameters must hold validation loss constant: {val_losses:?}"
        );
    }
}

#[test]
fn unknown_flags_are_rejected() {
    let dir = tempfile::tempdir().expect("tempdir");
    let output = ssounds(dir.path(), &["train", "--corpus", "x", "--bogus-flag"]);
    assert_eq!(output.status.code(), Some(2), "clap rejects unknown arguments with code 2");
    assert!(
        String::from_utf8_lossy(&output.stderr).contains("--bogus-flag"),
        "the error should name the offending flag"
    );
}

#[test]
fn mismatched_checkpoint_configuration_is_refused() {
    let dir = tempfile::tempdir().expect("tempdir");
    let corpus = dir.path().join("corpus");
    let run = dir.path().join("run");

    run_ok(&corpus, &["--seed", "23", "synth-data", "--classes", "3", "--per-class", "4"]);
    run_ok(
        &run,
        &["--seed", "23", "train", "--corpus", corpus.to_str().unwrap(), "--max-epochs", "1"],
    );

    // A config that disagrees with the one the checkpoint was trained under.
    let other = dir.path().join("mean.toml");
    std::fs::write(&other, "[model]\npooling = \"mean\"\n").expect("write config");

    let output = ssounds(
        &dir.path().join("eval"),
        &[
            "--config",
            other.to_str().unwrap(),
            "eval",
            "--corpus",
            corpus.to_str().unwrap(),
            "--checkpoint",
            run.join("model.ssck").to_str().unwrap(),
        ],
    );
    assert_eq!(output.status.code(), Some(1));
    assert!(
        String::from_utf8_lossy(&output.stderr).contains("different configuration"),
        "stderr should explain the configuration mismatch:\n{}",
        String::from_utf8_lossy(&output.stderr)
    );
}
