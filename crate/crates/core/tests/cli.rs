//! End-to-end runs of the `secure-jscc` binary on a synthetic dataset.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_secure-jscc"));
    c.env_remove("CIFAR10_DIR").env_remove("SECURE_JSCC_OUT").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// One synthetic dataset shared by every test in this file.
fn dataset() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli-synthetic");
        if !dir.join("test_batch.bin").exists() {
            ok(&["synth", dir.to_str().unwrap(), "--seed", "1"]);
        }
        dir
    })
}

const TINY: [&str; 8] = [
    "--set",
    "data.train_subset=20",
    "--set",
    "data.eval_subset=20",
    "--set",
    "optim.episodes=1",
    "--set",
    "optim.batch_size=10",
];

fn train(out: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["train", "--data", dataset().to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend(TINY);
    args.extend(extra);
    PathBuf::from(ok(&args).trim())
}

fn last_line(s: &str) -> PathBuf {
    PathBuf::from(s.lines().last().unwrap().trim())
}

#[test]
fn help_exits_zero() {
    let out = run(&["train", "--help"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("--desk-scale"));
}

#[test]
fn bad_invocations_fail_with_a_diagnostic() {
    for args in [
        vec!["train", "--no-such-flag"],
        vec!["train", "--config", "/nonexistent/run.toml"],
        vec!["train", "--set", "secrecy.nope=1", "--data", "/tmp"],
        vec!["eval", "--checkpoint", "/nonexistent/checkpoint.safetensors"],
        vec!["frobnicate"],
    ] {
        let out = run(&args);
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(!out.stderr.is_empty(), "{args:?} printed no diagnostic");
    }
}

#[test]
fn training_without_data_explains_how_to_get_some() {
    let out = run(&["train"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("CIFAR10_DIR"));
}

#[test]
fn train_eval_sweep_report_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    let data = dataset().to_str().unwrap();
    let ckpt = train(out, &["--seed", "3"]);
    assert!(ckpt.exists());
    let run_dir = ckpt.parent().unwrap();
    assert!(run_dir.join("config.snapshot").exists());
    assert!(run_dir.join("history.jsonl").exists());
    let ck = ckpt.to_str().unwrap();
    let o = out.to_str().unwrap();

    let stdout = ok(&["eval", "--checkpoint", ck, "--channel", "nakagami", "--m", "3", "--data", data, "--out", o]);
    assert!(stdout.starts_with("nakagami:"));
    let eval_dir = last_line(&stdout);
    for f in ["data.csv", "plot.svg", "config.snapshot"] {
        assert!(eval_dir.join(f).exists(), "missing {f}");
    }
    let csv = std::fs::read_to_string(eval_dir.join("data.csv")).unwrap();
    assert!(csv.contains("nakagami"));

    let stdout = ok(&["sweep", "--checkpoint", ck, "--channel", "awgn,rayleigh", "--gamma-b", "10,20", "--data", data, "--out", o]);
    let sweep_dir = last_line(&stdout);
    assert!(sweep_dir.join("plot-awgn.svg").exists());
    assert!(sweep_dir.join("plot-rayleigh.svg").exists());
    let rows = std::fs::read_to_string(sweep_dir.join("data.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + 4);

    std::fs::remove_file(sweep_dir.join("plot.svg")).unwrap();
    ok(&["report", sweep_dir.to_str().unwrap()]);
    assert!(sweep_dir.join("plot.svg").exists());
}

#[test]
fn same_seed_same_artifacts_and_resume_is_a_no_op() {
    let tmp = tempfile::tempdir().unwrap();
    let a = train(&tmp.path().join("a"), &["--seed", "5"]);
    let b = train(&tmp.path().join("b"), &["--seed", "5"]);
    let other = train(&tmp.path().join("a"), &["--seed", "6"]);
    assert_ne!(a.parent().unwrap().file_name(), other.parent().unwrap().file_name());
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(read(&a), read(&b));
    let history = |p: &Path| read(&p.parent().unwrap().join("history.jsonl"));
    assert_eq!(history(&a), history(&b));

    // a finished run is picked up again instead of retrained
    let again = train(&tmp.path().join("a"), &["--seed", "5"]);
    assert_eq!(again, a);
    assert_eq!(history(&again), history(&b));
}

#[test]
fn incompatible_checkpoint_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let bogus = tmp.path().join("bogus.safetensors");
    std::fs::write(&bogus, b"not a checkpoint").unwrap();
    let out = run(&["eval", "--checkpoint", bogus.to_str().unwrap(), "--data", dataset().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus.safetensors"));
}
