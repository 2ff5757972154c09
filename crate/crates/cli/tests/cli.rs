use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cliquebatch::dataset::{EvalAnnotations, QueryAnnotation};
use cliquebatch::similarity::SimilarityMatrix;
use nalgebra::DMatrix;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cliquebatch"));
    cmd.env("CBM_THREADS", "1");
    cmd
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().expect("binary runs")
}

fn workspace_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn write_blob_spec(dir: &Path) {
    let spec = r#"{"kind":"gaussian_blobs","n_clusters":3,"n_samples":30,"dim":4,"noise_sigma":0.1,"seed":3}"#;
    fs::write(dir.join("spec.json"), spec).unwrap();
}

#[test]
fn pipeline_on_shipped_config_writes_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = workspace_file("configs/blobs.json");
    let o = run(
        &["pipeline", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let diag = fs::read_to_string(out.join("diagnostics.csv")).unwrap();
    let lines: Vec<&str> = diag.lines().collect();
    assert_eq!(lines[0], "round,auc_if_labels,spectrum_k90,reliable_pairs_mean");
    assert_eq!(lines.len(), 1 + 2);
    for round in 0..2 {
        for name in ["cliques.json", "batches.json", "model.bin", "loss.csv", "cccp.csv", "similarity.bin"] {
            assert!(out.join(format!("round_{round}")).join(name).is_file(), "round {round} {name}");
        }
    }
}

#[test]
fn missing_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["batches", "--similarity", "s.bin"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["similarity", "--features", "absent.csv", "--out", "s.bin"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    fs::write(dir.path().join("bad.csv"), "1,2\n3\n").unwrap();
    let o = run(&["similarity", "--features", "bad.csv", "--out", "s.bin"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_of_constant_similarity_is_chance() {
    let dir = tempfile::tempdir().unwrap();
    SimilarityMatrix::new(DMatrix::from_element(4, 4, 0.2))
        .unwrap()
        .save(dir.path().join("s.bin"))
        .unwrap();
    let ann = EvalAnnotations {
        queries: [
            (0, QueryAnnotation { pos: vec![1], neg: vec![2, 3] }),
            (2, QueryAnnotation { pos: vec![3], neg: vec![0] }),
        ]
        .into_iter()
        .collect(),
    };
    ann.save(dir.path().join("ann.json")).unwrap();
    let o = run(
        &["eval", "--similarity", "s.bin", "--annotations", "ann.json", "--out", "r.csv", "--summary", "sum.json"],
        dir.path(),
    );
    assert!(o.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["mean_auc"], 0.5);
    assert_eq!(summary["n_queries"], 2);
    let file: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("sum.json")).unwrap()).unwrap();
    assert_eq!(file, summary);
    assert_eq!(fs::read_to_string(dir.path().join("r.csv")).unwrap(), "query,auc\n0,0.5\n2,0.5\n");
}

#[test]
fn stages_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_blob_spec(d);
    fs::write(d.join("cp.json"), r#"{"target_k": 3}"#).unwrap();
    fs::write(d.join("bp.json"), r#"{"b": 3, "r": 2, "lambda3": 10}"#).unwrap();
    fs::write(d.join("tp.json"), r#"{"iterations": 100, "hidden": 8}"#).unwrap();
    let steps: [&[&str]; 5] = [
        &["synth", "--spec", "spec.json", "--out", "f.bin", "--annotations", "ann.json"],
        &["similarity", "--features", "f.bin", "--out", "s.bin"],
        &["cliques", "--similarity", "s.bin", "--features", "f.bin", "--params", "cp.json", "--out", "c.json"],
        &["batches", "--similarity", "s.bin", "--cliques", "c.json", "--params", "bp.json", "--out", "x.json", "--log", "cccp.csv"],
        &["train", "--features", "f.bin", "--cliques", "c.json", "--batches", "x.json", "--params", "tp.json", "--out", "m.bin", "--log", "loss.csv"],
    ];
    let outputs = ["f.bin", "ann.json", "s.bin", "c.json", "x.json", "cccp.csv", "m.bin", "loss.csv"];
    let mut first = Vec::new();
    for pass in 0..2 {
        for step in steps {
            let o = run(step, d);
            assert!(o.status.success(), "{step:?}: {}", String::from_utf8_lossy(&o.stderr));
        }
        let bytes: Vec<Vec<u8>> = outputs.iter().map(|f| fs::read(d.join(f)).unwrap()).collect();
        if pass == 0 {
            first = bytes;
        } else {
            assert_eq!(first, bytes);
        }
    }
}

#[test]
fn seed_flag_changes_synthetic_output() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_blob_spec(d);
    assert!(run(&["synth", "--spec", "spec.json", "--out", "a.csv"], d).status.success());
    assert!(run(&["--seed", "9", "synth", "--spec", "spec.json", "--out", "b.csv"], d).status.success());
    assert_ne!(fs::read(d.join("a.csv")).unwrap(), fs::read(d.join("b.csv")).unwrap());
}

#[test]
fn strict_batches_fail_numerically_when_unsettled() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_blob_spec(d);
    fs::write(d.join("bp.json"), r#"{"b": 3, "r": 2, "lambda3": 10, "cccp_max_iter": 1}"#).unwrap();
    fs::write(d.join("cp.json"), r#"{"target_k": 3}"#).unwrap();
    assert!(run(&["synth", "--spec", "spec.json", "--out", "f.bin"], d).status.success());
    assert!(run(&["similarity", "--features", "f.bin", "--out", "s.bin"], d).status.success());
    assert!(run(&["cliques", "--similarity", "s.bin", "--params", "cp.json", "--out", "c.json"], d).status.success());
    let args = ["batches", "--similarity", "s.bin", "--cliques", "c.json", "--params", "bp.json", "--out", "x.json"];
    assert!(run(&args, d).status.success());
    let mut strict = args.to_vec();
    strict.push("--strict");
    assert_eq!(run(&strict, d).status.code(), Some(3));
}
