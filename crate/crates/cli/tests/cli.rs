use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn iaraudit(dir: &Path, args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_iaraudit"));
    cmd.current_dir(dir).args(args).env_remove("IARAUDIT_SEED");
    if let Some(s) = seed_env {
        cmd.env("IARAUDIT_SEED", s);
    }
    cmd.output().unwrap()
}

fn small_gen(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "sim",
        "gen",
        "--out",
        out,
        "--classes",
        "2",
        "--members-per-class",
        "12",
        "--nonmembers-per-class",
        "12",
        "--canaries",
        "2",
        "--duplication",
        "5",
    ];
    args.extend_from_slice(extra);
    iaraudit(dir, &args, None)
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn no_arguments_prints_usage_and_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = iaraudit(dir.path(), &[], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn bad_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        iaraudit(dir.path(), &["sim", "gen", "--bogus"], None).status.code(),
        Some(1)
    );
    assert_eq!(
        iaraudit(dir.path(), &["sim", "gen", "-o", "x"], None).status.code(),
        Some(1)
    );
    assert_eq!(
        small_gen(dir.path(), "g", &["--walk-max", "1.5"]).status.code(),
        Some(1)
    );
    assert_eq!(
        iaraudit(dir.path(), &["sim", "gen", "--out", "g"], Some("seven"))
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn help_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(iaraudit(dir.path(), &["--help"], None).status.code(), Some(0));
}

#[test]
fn sim_gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        assert!(small_gen(dir.path(), out, &["--seed", "7"]).status.success());
    }
    let a = std::fs::read(dir.path().join("a/corpus.json")).unwrap();
    let b = std::fs::read(dir.path().join("b/corpus.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn seed_sources_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(small_gen(d, "default", &[]).status.success());
    assert_eq!(manifest(&d.join("default"))["seed"], 7);
    assert_eq!(manifest(&d.join("default"))["seed_source"], "default");

    let args = [
        "sim",
        "gen",
        "--out",
        "env",
        "--classes",
        "2",
        "--members-per-class",
        "4",
    ];
    assert!(iaraudit(d, &args, Some("11")).status.success());
    assert_eq!(manifest(&d.join("env"))["seed"], 11);
    assert_eq!(manifest(&d.join("env"))["seed_source"], "env");

    let args = [
        "sim",
        "gen",
        "--out",
        "flag",
        "--seed",
        "3",
        "--classes",
        "2",
        "--members-per-class",
        "4",
    ];
    assert!(iaraudit(d, &args, Some("11")).status.success());
    assert_eq!(manifest(&d.join("flag"))["seed"], 3);
    assert_eq!(manifest(&d.join("flag"))["seed_source"], "flag");
}

#[test]
fn malformed_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.jsonl"), "{\"format\": \"nope\"}\n").unwrap();
    let out = iaraudit(d, &["attack", "score", "--trace", "bad.jsonl", "--out", "s"], None);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let out = iaraudit(d, &["sim", "fit", "--corpus", "missing.json", "--out", "f"], None);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(d.join("corpus.json"), "[1, 2").unwrap();
    let out = iaraudit(d, &["sim", "fit", "--corpus", "corpus.json", "--out", "f"], None);
    assert_eq!(out.status.code(), Some(2));
}

/// Generates, fits and exports a small discrete trace under `dir/t`.
fn small_trace(d: &Path) {
    assert!(small_gen(d, "g", &[]).status.success());
    assert!(
        iaraudit(d, &["sim", "fit", "--corpus", "g/corpus.json", "--out", "f"], None)
            .status
            .success()
    );
    let export = [
        "sim",
        "export",
        "--corpus",
        "g/corpus.json",
        "--model",
        "f/model.json",
        "--out",
        "t",
    ];
    assert!(iaraudit(d, &export, None).status.success());
}

#[test]
fn numerical_failures_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_trace(d);
    let args = [
        "attack",
        "eval",
        "--trace",
        "t/trace.jsonl.gz",
        "--subsample",
        "0.01",
        "--out",
        "e",
    ];
    let out = iaraudit(d, &args, None);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn pipeline_outputs_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_trace(d);
    let eval = [
        "attack",
        "eval",
        "--trace",
        "t/trace.jsonl.gz",
        "--attacks",
        "loss@diff,zlib@cond",
        "--out",
        "e",
    ];
    let out = iaraudit(d, &eval, Some("5"));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["scores.csv", "roc.csv", "metrics.csv", "metrics.json", "manifest.json"] {
        assert!(d.join("e").join(f).exists(), "{f}");
    }
    let m = manifest(&d.join("e"));
    assert_eq!(m["command"], "attack eval");
    assert_eq!(m["flags"]["trials"], 100);
    assert_eq!(m["seed"], 5);

    let replay = ["replay", "--manifest", "e/manifest.json", "--out", "r"];
    assert!(iaraudit(d, &replay, None).status.success());
    for f in ["scores.csv", "roc.csv", "metrics.csv", "metrics.json"] {
        assert_eq!(
            std::fs::read(d.join("e").join(f)).unwrap(),
            std::fs::read(d.join("r").join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(manifest(&d.join("r"))["seed_source"], "flag");

    let di = [
        "di",
        "run",
        "--trace",
        "t/trace.jsonl.gz",
        "--di-grid",
        "2,4,6",
        "--out",
        "di",
    ];
    let out = iaraudit(d, &di, None);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("rejected="), "{stdout}");
    let report: Value = serde_json::from_str(&std::fs::read_to_string(d.join("di/di.json")).unwrap()).unwrap();
    assert!(report["rejected"].is_boolean());
    assert_eq!(report["search"]["grid"], serde_json::json!([2, 4, 6]));

    let too_big = [
        "di",
        "run",
        "--trace",
        "t/trace.jsonl.gz",
        "--di-grid",
        "2,4000",
        "--out",
        "di2",
    ];
    assert_eq!(iaraudit(d, &too_big, None).status.code(), Some(1));
}
