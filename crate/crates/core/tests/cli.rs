//! End-to-end runs of the `progq` binary.

use std::path::Path;
use std::process::{Command, Output};

fn progq(dir: &Path, args: &[&str], env_seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_progq"));
    cmd.current_dir(dir).env_remove("PROGQ_SEED").args(args);
    if let Some(s) = env_seed {
        cmd.env("PROGQ_SEED", s);
    }
    cmd.output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = progq(dir, args, None);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Well separated clusters so that retrieval by class is easy.
fn synth(dir: &Path) {
    ok(
        dir,
        &[
            "--seed", "1", "synth", "--out", "data", "--points-per-cluster", "40", "--noise", "0.01",
        ],
    );
}

const SMALL: &[&str] = &[
    "--epochs", "2", "--layers", "2", "--codebook-size", "4", "--embed-dim", "8",
];

fn train(dir: &Path, model: &str, pre: &[&str], env_seed: Option<&str>) -> Vec<u8> {
    let mut args: Vec<&str> = pre.to_vec();
    args.extend(["--threads", "1", "train", "--data", "data", "--model", model]);
    args.extend(SMALL);
    let out = progq(dir, &args, env_seed);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    std::fs::read(dir.join(model)).unwrap()
}

#[test]
fn usage_and_runtime_errors_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = progq(dir.path(), &["train", "--no-such-flag"], None);
    assert_eq!(out.status.code(), Some(2));
    let out = progq(
        dir.path(),
        &["encode", "--data", "missing", "--model", "m", "--codes", "c"],
        None,
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = progq(dir.path(), &["train", "--model", "m"], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--data"));
}

#[test]
fn seed_precedence_flag_config_env() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    synth(root);
    std::fs::write(root.join("seed4.json"), r#"{"seed": 4}"#).unwrap();

    let flag3 = train(root, "a.model", &["--seed", "3"], None);
    let flag4 = train(root, "b.model", &["--seed", "4"], None);
    assert_ne!(flag3, flag4, "different seeds should give different models");
    assert_eq!(train(root, "c.model", &["--config", "seed4.json"], None), flag4);
    assert_eq!(train(root, "d.model", &[], Some("3")), flag3);
    // the flag beats the config file, which beats the environment
    assert_eq!(
        train(root, "e.model", &["--config", "seed4.json", "--seed", "3"], Some("4")),
        flag3
    );
    assert_eq!(train(root, "f.model", &["--config", "seed4.json"], Some("3")), flag4);

    let out = progq(root, &["train", "--data", "data", "--model", "g.model"], Some("abc"));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_file_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"sead": 4}"#).unwrap();
    let out = progq(dir.path(), &["--config", "bad.json", "gradcheck", "--cases", "1"], None);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn pipeline_reports_perfect_map_on_separated_clusters() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    synth(root);
    ok(
        root,
        &[
            "--seed", "2", "train", "--data", "data", "--model", "m", "--epochs", "8", "--layers", "2",
            "--codebook-size", "16", "--embed-dim", "16",
        ],
    );
    ok(root, &["encode", "--data", "data", "--model", "m", "--codes", "c"]);
    let hits = ok(
        root,
        &["search", "--data", "data", "--model", "m", "--codes", "c", "--k", "3"],
    );
    assert_eq!(hits.lines().count(), 40);
    assert!(hits
        .lines()
        .all(|l| l.split('\t').nth(1).unwrap().split(' ').count() == 3));

    ok(
        root,
        &[
            "eval", "--data", "data", "--model", "m", "--codes", "c", "--report", "r.csv", "--pr-curve", "pr.csv",
            "--r", "36",
        ],
    );
    let report = std::fs::read_to_string(root.join("r.csv")).unwrap();
    assert!(report.starts_with("metric,code_bits,value\n"));
    let map: Vec<f64> = report
        .lines()
        .filter(|l| l.starts_with("map"))
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(map.len(), 2);
    assert_eq!(map[1], 1.0, "{report}");
    let pr = std::fs::read_to_string(root.join("pr.csv")).unwrap();
    assert!(pr.starts_with("code_bits,point,recall,precision\n"));
    assert_eq!(pr.matches("code_bits").count(), 1);
}

#[test]
fn gradcheck_subcommand_passes_from_seed_seven() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["--seed", "7", "gradcheck"]);
    assert!(stdout.contains("20 cases from seed 7"), "{stdout}");
    let out = progq(dir.path(), &["gradcheck", "--cases", "3", "--tolerance", "0"], None);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn codes_from_another_model_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    synth(root);
    train(root, "a.model", &["--seed", "3"], None);
    train(root, "b.model", &["--seed", "4"], None);
    ok(
        root,
        &["encode", "--data", "data", "--model", "a.model", "--codes", "a.codes"],
    );
    let out = progq(
        root,
        &["search", "--data", "data", "--model", "b.model", "--codes", "a.codes"],
        None,
    );
    assert_eq!(out.status.code(), Some(1));
}
