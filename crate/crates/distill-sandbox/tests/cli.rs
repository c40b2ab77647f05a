//! Exit-code contract and artifact layout of the command-line interface:
//! 0 on success, 1 for usage or configuration mistakes, 2 when a stage
//! fails at runtime.

use std::path::Path;
use std::process::{Command, Output};

use distill_sandbox::harness::store::RunDirs;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_distill-sandbox"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

#[test]
fn help_exits_zero() {
    let out = run(&["--help"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("Usage"), "help text missing: {text}");
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(code(&run(&["frobnicate"])), 1);
}

#[test]
fn missing_out_flag_is_a_usage_error() {
    assert_eq!(code(&run(&["generate"])), 1);
}

#[test]
fn unreadable_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "generate",
        "--config",
        "/nonexistent/config.toml",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1, "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn eval_without_artifacts_is_a_stage_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["eval", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2, "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_arm_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_str().unwrap();
    assert_eq!(code(&run(&["generate", "--out", root])), 0);
    let out = run(&["train-student", "--arm", "no-such-arm", "--out", root]);
    assert_eq!(code(&out), 1, "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn generate_writes_data_artifacts_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_str().unwrap();
    let first = run(&["generate", "--out", root]);
    assert_eq!(code(&first), 0, "stderr: {}", String::from_utf8_lossy(&first.stderr));
    let dirs = RunDirs::new(tmp.path());
    for path in [dirs.matrix(), dirs.teacher_train(), dirs.student_train(), dirs.eval_set()] {
        assert!(path.exists(), "missing artifact {}", path.display());
    }
    let second = run(&["generate", "--out", root]);
    assert_eq!(code(&second), 0);
    let text = String::from_utf8_lossy(&second.stdout);
    assert!(text.contains("up to date"), "rerun did not resume: {text}");
}

#[test]
fn seed_override_changes_the_generated_data() {
    let base = tempfile::tempdir().unwrap();
    let other = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["generate", "--out", base.path().to_str().unwrap()])), 0);
    assert_eq!(
        code(&run(&["generate", "--seed", "99", "--out", other.path().to_str().unwrap()])),
        0
    );
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_ne!(
        read(&RunDirs::new(base.path()).matrix()),
        read(&RunDirs::new(other.path()).matrix()),
        "seed override left the transition matrix unchanged"
    );
}

#[test]
fn passk_tables_do_not_need_trained_models() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["passk", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let dirs = RunDirs::new(tmp.path());
    assert!(dirs.table("fig_alpha_star").exists());
    assert!(dirs.table("fig_classifier_curves").exists());
}

#[test]
fn complexity_sweep_runs_standalone() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["complexity", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let dirs = RunDirs::new(tmp.path());
    assert!(dirs.complexity().exists());
    assert!(dirs.table("fig_complexity").exists());
}
