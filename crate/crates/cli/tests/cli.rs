use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tdpg(args: &[&str], threads: usize) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdpg"))
        .args(args)
        .env("TDPG_THREADS", threads.to_string())
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn small_train(dir: &Path, algo: &str) -> Vec<String> {
    [
        "train",
        "--env",
        "lava",
        "--algo",
        algo,
        "--epochs",
        "3",
        "--rollouts",
        "40",
        "--mine-minibatch",
        "20",
        "--mine-epochs-first",
        "5",
        "--mine-epochs",
        "2",
        "--seed",
        "4",
        "--out-dir",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([dir.display().to_string()])
    .collect()
}

fn strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&tdpg(&["train"], 1)), 1);
    assert_eq!(code(&tdpg(&["train", "--env", "lava", "--no-such-key", "3"], 1)), 1);
    assert_eq!(code(&tdpg(&["frobnicate"], 1)), 1);
    assert_eq!(code(&tdpg(&["eval", "--env", "lava", "--checkpoint", "/nonexistent/ck"], 1)), 1);
    assert_eq!(code(&tdpg(&["render-debug", "--env", "lava"], 1)), 1);
}

#[test]
fn bad_config_file_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    fs::write(&path, "[train]\nepochs = 3\n[env]\nepochs = 4\n").unwrap();
    let out = tdpg(&["train", "--config", path.to_str().unwrap()], 1);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("run.cfg:4"), "{err}");
}

#[test]
fn train_writes_manifest_records_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = tdpg(&strs(&small_train(dir.path(), "tdpg")), 1);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("manifest_train.cfg").exists());
    let records = fs::read_to_string(dir.path().join("records.csv")).unwrap();
    assert_eq!(records.lines().count(), 4);
}

#[test]
fn training_is_reproducible_from_its_manifest_at_any_thread_count() {
    let first = tempfile::tempdir().unwrap();
    assert_eq!(code(&tdpg(&strs(&small_train(first.path(), "tdpg")), 1)), 0);
    let manifest = first.path().join("manifest_train.cfg");
    let second = tempfile::tempdir().unwrap();
    let out = tdpg(
        &[
            "train",
            "--config",
            manifest.to_str().unwrap(),
            "--out-dir",
            second.path().to_str().unwrap(),
        ],
        3,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let a = fs::read(first.path().join("records.csv")).unwrap();
    let b = fs::read(second.path().join("records.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn infeasible_sweep_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = small_train(dir.path(), "tdpg");
    args[0] = "sweep".into();
    args.extend(["--betas", "0.1", "--cost-cap", "0.001"].map(String::from));
    let out = tdpg(&strs(&args), 1);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("sweep.csv").exists());
}

#[test]
fn eval_with_comparison_writes_reports_and_histograms() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(code(&tdpg(&strs(&small_train(a.path(), "pg")), 1)), 0);
    assert_eq!(code(&tdpg(&strs(&small_train(b.path(), "tdpg")), 1)), 0);
    let ck = |d: &Path| d.join("final.bin");
    let out_dir = tempfile::tempdir().unwrap();
    let out = tdpg(
        &[
            "eval",
            "--env",
            "lava",
            "--checkpoint",
            ck(b.path()).to_str().unwrap(),
            "--compare",
            ck(a.path()).to_str().unwrap(),
            "--scenarios",
            "training,noise-1",
            "--eval-rollouts",
            "50",
            "--out-dir",
            out_dir.path().to_str().unwrap(),
        ],
        2,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "eval.csv",
        "compare.csv",
        "eval_noise-1.csv",
        "hist_training.csv",
        "hist_noise-1.svg",
        "manifest_eval.cfg",
    ] {
        assert!(out_dir.path().join(f).exists(), "{f}");
    }
    let summary = fs::read_to_string(out_dir.path().join("eval.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn mine_selftest_accepts_reduced_settings() {
    let dir = tempfile::tempdir().unwrap();
    let out = tdpg(
        &[
            "mine-selftest",
            "--samples",
            "1000",
            "--epochs",
            "5",
            "--out-dir",
            dir.path().to_str().unwrap(),
        ],
        1,
    );
    // Too little training to meet the tolerances: a numerical failure.
    assert!(matches!(code(&out), 0 | 2));
    let csv = fs::read_to_string(dir.path().join("mine_selftest.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}
