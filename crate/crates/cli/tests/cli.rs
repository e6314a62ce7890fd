use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn scenegen(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scenegen"))
        .args(args)
        .current_dir(dir)
        .env("ATISS_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = scenegen(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Tiny dataset plus a briefly trained small model.
fn fixture(dir: &Path) {
    ok(&["gen-data", "--n", "30", "--seed", "5", "--out", "data"], dir);
    std::fs::write(
        dir.join("cfg.json"),
        r#"{"model": {"d_ff": 32, "n_layers": 1}, "train": {"max_iterations": 6, "validation_interval": 3, "batch_size": 4}}"#,
    )
    .unwrap();
    ok(
        &["train", "--data", "data", "--config", "cfg.json", "--out", "m.ckpt"],
        dir,
    );
}

#[test]
fn pipeline_runs_and_synthesis_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fixture(dir);
    let metrics = std::fs::read_to_string(dir.join("m.csv")).unwrap();
    assert!(metrics.starts_with("iteration,train_nll,val_nll,wall_ms\n"));
    assert_eq!(metrics.lines().count(), 3);

    let floor = "data/scene_00000.json";
    ok(
        &[
            "synthesize",
            "--ckpt",
            "m.ckpt",
            "--floor",
            floor,
            "--seed",
            "9",
            "--out",
            "a.json",
        ],
        dir,
    );
    ok(
        &[
            "synthesize",
            "--ckpt",
            "m.ckpt",
            "--floor",
            floor,
            "--seed",
            "9",
            "--out",
            "b.json",
        ],
        dir,
    );
    assert_eq!(
        std::fs::read(dir.join("a.json")).unwrap(),
        std::fs::read(dir.join("b.json")).unwrap()
    );

    ok(
        &[
            "synthesize",
            "--ckpt",
            "m.ckpt",
            "--floor",
            "data",
            "--count",
            "4",
            "--out",
            "gen",
        ],
        dir,
    );
    assert_eq!(std::fs::read_dir(dir.join("gen")).unwrap().count(), 4);

    let report: Value = serde_json::from_str(&ok(&["evaluate", "--gen", "data", "--ref", "data"], dir)).unwrap();
    assert!(report["category_kl"].as_f64().unwrap().abs() < 1e-9);
    assert!(report["frequency_diff"]
        .as_array()
        .unwrap()
        .iter()
        .all(|v| v.as_f64() == Some(0.0)));

    ok(
        &[
            "evaluate",
            "--gen",
            "gen",
            "--ref",
            "data",
            "--ckpt",
            "m.ckpt",
            "--out",
            "r.json",
            "--csv-dir",
            "csv",
        ],
        dir,
    );
    assert!(dir.join("csv/cooccurrence_diff.csv").exists());
}

#[test]
fn scene_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fixture(dir);
    let scene = "data/scene_00002.json";
    let n = serde_json::from_str::<Value>(&std::fs::read_to_string(dir.join(scene)).unwrap()).unwrap()["objects"]
        .as_array()
        .unwrap()
        .len();

    let v: Value = serde_json::from_str(&ok(&["likelihoods", "--ckpt", "m.ckpt", "--scene", scene], dir)).unwrap();
    assert_eq!(v["scores"].as_array().unwrap().len(), n);

    let v: Value = serde_json::from_str(&ok(
        &["complete", "--ckpt", "m.ckpt", "--scene", scene, "--seed", "1"],
        dir,
    ))
    .unwrap();
    assert!(v["scene"]["objects"].as_array().unwrap().len() >= n);

    let v: Value = serde_json::from_str(&ok(
        &["place", "--ckpt", "m.ckpt", "--scene", scene, "--category", "chair"],
        dir,
    ))
    .unwrap();
    assert_eq!(v["object"]["category"].as_u64(), Some(1));

    let v: Value = serde_json::from_str(&ok(
        &[
            "suggest",
            "--ckpt",
            "m.ckpt",
            "--scene",
            scene,
            "--box",
            "-3,0,-3,3,3,3",
        ],
        dir,
    ))
    .unwrap();
    assert!(v.get("suggestion").is_some());

    let v: Value = serde_json::from_str(&ok(
        &["detect", "--ckpt", "m.ckpt", "--scene", scene, "--threshold", "1e9"],
        dir,
    ))
    .unwrap();
    assert_eq!(v["flagged"].as_array().unwrap().len(), 1);
}

#[test]
fn bad_input_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = scenegen(&["synthesize", "--bogus"], dir);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = scenegen(&["synthesize", "--ckpt", "missing.ckpt", "--floor", "f.json"], dir);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ckpt"));

    let out = scenegen(&["suggest", "--ckpt", "m", "--scene", "s", "--box", "1,2,3"], dir);
    assert_eq!(out.status.code(), Some(2));
}
