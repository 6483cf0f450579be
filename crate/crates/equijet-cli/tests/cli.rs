//! End-to-end command-line tests: each subcommand driven through the real
//! binary on small datasets, exercising artifacts, determinism, resume,
//! and error reporting.

use equijet_core::models::{encode_checkpoint, ModelClass, ModelConfig};
use equijet_core::build_model;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn equijet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_equijet")).args(args).output().expect("binary runs")
}

fn equijet_ok(args: &[&str]) -> Output {
    let out = equijet(args);
    assert!(
        out.status.success(),
        "equijet {:?} failed:\n{}\n{}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Writes a config with tiny event counts and a fast training schedule.
fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        "[gen]\nn_train = 256\nn_val = 96\nn_test = 600\n\n[train]\nepochs = 1\n",
    )
    .expect("config written");
    path
}

fn gen_data(dir: &Path, cfg: &Path, seed: &str) -> PathBuf {
    let data = dir.join(format!("data{seed}"));
    equijet_ok(&["gen", "--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap(), "--seed", seed]);
    data
}

#[test]
fn gen_writes_all_splits_with_configured_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    let out = equijet_ok(&[
        "gen", "--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap(), "--seed", "5",
    ]);
    for name in ["train.bin", "val.bin", "test.bin", "gen-config.toml"] {
        assert!(data.join(name).exists(), "{name} missing");
    }

    // The command reports per-split totals; check counts and, for the
    // largest split, that the half-and-half signal fraction lands within a
    // generous binomial window.
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    let split_line = |name: &str| -> (f64, f64) {
        let line = stdout.lines().find(|l| l.contains(name)).expect("split reported");
        let mut nums = line
            .split(|c: char| !c.is_ascii_digit())
            .filter(|s| !s.is_empty())
            .rev()
            .map(|s| s.parse::<f64>().unwrap());
        let n_sig = nums.next().unwrap();
        let n = nums.next().unwrap();
        (n, n_sig)
    };
    assert_eq!(split_line("train.bin").0, 256.0);
    assert_eq!(split_line("val.bin").0, 96.0);
    let (n, n_sig) = split_line("test.bin");
    assert_eq!(n, 600.0);
    let sigma = (600.0f64 * 0.25).sqrt();
    assert!(
        (n_sig - 300.0).abs() < 5.0 * sigma,
        "signal count {n_sig} far from the expected 300"
    );
}

fn write_fresh_checkpoint(dir: &Path) -> PathBuf {
    let cfg = ModelConfig {
        class: ModelClass::Tensor,
        enable_bilinear: true,
        enable_so2: true,
        latent: 8,
        hidden: 32,
        rep_width: 4,
        seed: 400,
    };
    let model = build_model(&cfg).expect("valid configuration");
    let path = dir.join("fresh.ckpt");
    std::fs::write(&path, encode_checkpoint(&model)).expect("checkpoint written");
    path
}

#[test]
fn gen_is_deterministic_in_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let a = gen_data(dir.path(), &cfg, "7");
    let b = dir.path().join("again");
    equijet_ok(&["gen", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap(), "--seed", "7"]);
    let c = gen_data(dir.path(), &cfg, "8");

    let read = |d: &Path| std::fs::read(d.join("train.bin")).unwrap();
    assert_eq!(read(&a), read(&b), "same seed must reproduce identical datasets");
    assert_ne!(read(&a), read(&c), "different seeds must differ");
}

#[test]
fn train_smoke_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = gen_data(dir.path(), &cfg, "11");
    let run = dir.path().join("run_out");
    equijet_ok(&[
        "train", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap(),
        "--out", run.to_str().unwrap(), "--seed", "11",
    ]);
    for name in ["model.ckpt", "last.ckpt", "trainer.state", "metrics.log", "run-config.toml"] {
        assert!(run.join("run").join(name).exists(), "{name} missing after training");
    }
    let log = std::fs::read_to_string(run.join("run/metrics.log")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("epoch,train_loss,val_loss,val_auc"));
    assert!(lines.next().unwrap().starts_with("1,"), "first epoch line");
}

#[test]
fn resume_continues_epoch_numbering_and_matches_a_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = gen_data(dir.path(), &cfg, "13");
    let data_s = data.to_str().unwrap();
    let cfg_s = cfg.to_str().unwrap();

    // One epoch, then resume up to three.
    let resumed = dir.path().join("resumed");
    let r_s = resumed.to_str().unwrap();
    equijet_ok(&["train", "--config", cfg_s, "--data", data_s, "--out", r_s, "--seed", "13"]);
    equijet_ok(&[
        "train", "--config", cfg_s, "--data", data_s, "--out", r_s, "--seed", "13",
        "--epochs", "3", "--resume",
    ]);

    // Three epochs in one go.
    let straight = dir.path().join("straight");
    equijet_ok(&[
        "train", "--config", cfg_s, "--data", data_s, "--out", straight.to_str().unwrap(),
        "--seed", "13", "--epochs", "3",
    ]);

    let log_r = std::fs::read_to_string(resumed.join("run/metrics.log")).unwrap();
    let epochs: Vec<&str> =
        log_r.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(epochs, ["1", "2", "3"], "resume must continue epoch numbering");

    let log_s = std::fs::read_to_string(straight.join("run/metrics.log")).unwrap();
    assert_eq!(log_r, log_s, "a resumed run must match the straight run exactly");
}

#[test]
fn untrained_model_scores_at_chance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = gen_data(dir.path(), &cfg, "17");
    let ckpt = write_fresh_checkpoint(dir.path());
    let ev = dir.path().join("ev");
    equijet_ok(&[
        "eval", "--data", data.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(),
        "--out", ev.to_str().unwrap(),
    ]);
    let summary = std::fs::read_to_string(ev.join("summary.txt")).unwrap();
    let auc: f64 = summary
        .lines()
        .find_map(|l| l.strip_prefix("auc "))
        .expect("summary reports auc")
        .parse()
        .unwrap();
    assert!((auc - 0.5).abs() < 0.05, "untrained checkpoint should score near chance, got {auc}");
    assert!(ev.join("roc.txt").exists());

    // Same checkpoint and data again: byte-identical summary.
    let ev2 = dir.path().join("ev2");
    equijet_ok(&[
        "eval", "--data", data.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(),
        "--out", ev2.to_str().unwrap(),
    ]);
    assert_eq!(
        std::fs::read(ev.join("summary.txt")).unwrap(),
        std::fs::read(ev2.join("summary.txt")).unwrap()
    );
}

#[test]
fn missing_dataset_is_an_explicit_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = write_fresh_checkpoint(dir.path());
    let out = equijet(&[
        "eval", "--data", dir.path().join("nowhere").to_str().unwrap(),
        "--checkpoint", ckpt.to_str().unwrap(),
        "--out", dir.path().join("ev").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("test.bin"), "error should name the missing file, got: {err}");
}

#[test]
fn resume_rejects_a_changed_model_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = gen_data(dir.path(), &cfg, "19");
    let run = dir.path().join("run_out");
    let (cfg_s, data_s, run_s) = (cfg.to_str().unwrap(), data.to_str().unwrap(), run.to_str().unwrap());
    equijet_ok(&[
        "train", "--config", cfg_s, "--data", data_s, "--out", run_s, "--seed", "23",
        "--model", "vector",
    ]);
    let out = equijet(&[
        "train", "--config", cfg_s, "--data", data_s, "--out", run_s, "--seed", "23",
        "--model", "tensor", "--epochs", "2", "--resume",
    ]);
    assert!(!out.status.success(), "resuming under a different architecture must fail");
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("configuration"), "error should explain the mismatch, got: {err}");
}

#[test]
fn check_reports_all_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = equijet_ok(&["check", "--out", dir.path().to_str().unwrap()]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("PASS"), "self-check output should list passing checks");
    assert!(!text.contains("FAIL"), "fresh build must pass every self-check:\n{text}");
}

#[test]
fn ablate_smoke_emits_every_ladder_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = gen_data(dir.path(), &cfg, "29");
    let abl = dir.path().join("abl");
    equijet_ok(&[
        "ablate", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap(),
        "--out", abl.to_str().unwrap(), "--seeds", "1", "--epochs", "1",
    ]);
    let table = std::fs::read_to_string(abl.join("ablation.txt")).unwrap();
    for row in
        ["baseline", "vector", "vector+BiL", "vector+BiL+SO2", "tensor", "tensor+BiL", "tensor+BiL+SO2"]
    {
        assert!(table.contains(row), "ablation table missing row {row}");
    }
    let csv = std::fs::read_to_string(abl.join("ablation.csv")).unwrap();
    assert!(csv.starts_with("row,median_auc,iqr_auc,"), "machine-readable header");
    assert_eq!(csv.lines().count(), 8, "header plus one line per ladder row");
    let runs = std::fs::read_to_string(abl.join("runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 8, "one run per row at a single seed");
}
