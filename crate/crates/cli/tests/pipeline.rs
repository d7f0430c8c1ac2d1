//! Drive the installed binary end to end: exit codes, artifact chaining,
//! and the config-file workflow, exactly as a user would run them.

use std::path::Path;
use std::process::{Command, Output};

fn cycledst(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cycledst"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    for flag in ["--help", "--version"] {
        let out = cycledst(&[flag], dir.path());
        assert!(out.status.success(), "{flag} failed: {}", stderr(&out));
    }
    let out = cycledst(&["eval", "--help"], dir.path());
    assert!(out.status.success());
    assert!(stdout(&out).contains("--predictions"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = cycledst(&["--no-such-flag", "split"], dir.path());
    assert_eq!(out.status.code(), Some(1), "unknown flag: {}", stderr(&out));
    let out = cycledst(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(1), "unknown subcommand");
    let out = cycledst(&["--backend", "psychic", "split"], dir.path());
    assert_eq!(out.status.code(), Some(1), "unknown backend keyword");
    let out = cycledst(&["--config", "does_not_exist.toml", "split"], dir.path());
    assert_eq!(out.status.code(), Some(1), "explicit missing config");
}

#[test]
fn missing_artifacts_exit_two_and_name_the_producer() {
    let dir = tempfile::tempdir().unwrap();
    let out = cycledst(&["split"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("cycledst ingest"),
        "error must name the prerequisite: {}",
        stderr(&out)
    );
    let out = cycledst(&["selftrain"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = cycledst(&["ingest"], dir.path());
    assert_eq!(out.status.code(), Some(1), "ingest without sources is a usage error");
}

#[test]
fn full_pipeline_runs_from_the_starter_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = cycledst(
        &["--seed", "11", "synth", "--dialogues-per-domain", "4", "--out", "."],
        dir.path(),
    );
    assert!(out.status.success(), "synth: {}", stderr(&out));
    assert!(dir.path().join("synth_run.toml").exists());

    for step in [
        vec!["--config", "synth_run.toml", "ingest"],
        vec!["--config", "synth_run.toml", "split"],
        vec!["--config", "synth_run.toml", "joint"],
        vec!["--config", "synth_run.toml", "selftrain"],
        vec!["--config", "synth_run.toml", "eval"],
        vec!["--config", "synth_run.toml", "oracle"],
        vec!["--config", "synth_run.toml", "discover"],
        vec!["--config", "synth_run.toml", "icl"],
    ] {
        let out = cycledst(&step, dir.path());
        assert!(out.status.success(), "{step:?} failed: {}", stderr(&out));
    }

    let metrics = std::fs::read_to_string(dir.path().join("work/metrics.json")).unwrap();
    let metrics: serde_json::Value = serde_json::from_str(&metrics).unwrap();
    assert_eq!(metrics["jga"].as_f64().unwrap(), 1.0);

    // rerunning a command against unchanged inputs is idempotent
    let before = std::fs::read(dir.path().join("work/joint_manifest.jsonl")).unwrap();
    let out = cycledst(&["--config", "synth_run.toml", "joint"], dir.path());
    assert!(out.status.success());
    let after = std::fs::read(dir.path().join("work/joint_manifest.jsonl")).unwrap();
    assert_eq!(before, after);
}

#[test]
fn eval_reports_jga_on_stdout() {
    let dir = tempfile::tempdir().unwrap();
    for step in [
        vec!["--seed", "3", "synth", "--dialogues-per-domain", "3", "--out", "."],
        vec!["--config", "synth_run.toml", "ingest"],
        vec!["--config", "synth_run.toml", "split"],
        vec!["--config", "synth_run.toml", "eval"],
    ] {
        let out = cycledst(&step, dir.path());
        assert!(out.status.success(), "{step:?} failed: {}", stderr(&out));
        if step.last() == Some(&"eval") {
            assert!(stdout(&out).contains("jga=1.0000"), "got {}", stdout(&out));
        }
    }
}
