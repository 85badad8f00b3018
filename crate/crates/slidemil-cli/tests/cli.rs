//! End-to-end command tests: each stage through the real binary, exit
//! codes, and the machine-parseable error line.

use std::path::Path;
use std::process::{Command, Output};

fn slidemil(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slidemil"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, seed: u64) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    let text = format!(
        r#"
mode = "dlcnbc-ws"
task = "binary"
seed = {seed}

[paths]
slides = "data/slides"
clinical = "data/clinical.csv"
out = "out"

[tiling]
tile_size = 32
stride = 32
resize_to = 12

[bags]
n_instances = 5
bags_per_slide = 2

[model]
conv1_channels = 4
feature_dim = 8
attn_hidden = 4

[train]
epochs = 2
"#
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn stderr_line(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).trim().to_string()
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_config(root, 11);

    let synth = slidemil(
        &["synth", "--patients", "8", "--tile-size", "32", "--seed", "11", "--out", "data"],
        root,
    );
    assert!(synth.status.success(), "{}", stderr_line(&synth));
    assert!(root.join("data/slides/P0000.png").exists());
    assert!(root.join("data/clinical.csv").exists());

    for stage in ["tile", "bags", "train", "eval"] {
        let out = slidemil(&[stage, "--config", "run.toml"], root);
        assert!(out.status.success(), "{stage}: {}", stderr_line(&out));
    }
    assert!(root.join("out/patches.csv").exists());
    assert!(root.join("out/bags.jsonl").exists());
    assert!(root.join("out/model.ckpt").exists());
    assert!(root.join("out/train_log.csv").exists());
    assert!(root.join("out/metrics.csv").exists());
    assert!(root.join("out/roc_test.csv").exists());

    let report = slidemil(
        &["report", "--out-file", "report.md", "out/metrics.csv"],
        root,
    );
    assert!(report.status.success(), "{}", stderr_line(&report));
    let table = std::fs::read_to_string(root.join("report.md")).unwrap();
    assert!(table.contains("| AUROC |"));
    assert!(table.contains("| dlcnbc-ws |"));

    let metrics = std::fs::read_to_string(root.join("out/metrics.csv")).unwrap();
    assert!(metrics.starts_with("# config_hash="));
    assert_eq!(
        metrics.lines().nth(1).unwrap(),
        "cohort,class,auroc,accuracy,sensitivity,specificity,ppv,npv,f1"
    );
}

#[test]
fn report_compares_masked_and_whole_slide_runs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let synth = slidemil(
        &["synth", "--patients", "8", "--tile-size", "32", "--seed", "21", "--out", "data"],
        root,
    );
    assert!(synth.status.success(), "{}", stderr_line(&synth));
    for (name, mode, masks, out) in [
        ("ws.toml", "dlcnbc-ws", "", "out-ws"),
        ("masked.toml", "dlcnbc", "masks = \"data/masks\"", "out-masked"),
    ] {
        let text = format!(
            r#"
mode = "{mode}"
seed = 21

[paths]
slides = "data/slides"
clinical = "data/clinical.csv"
{masks}
out = "{out}"

[tiling]
tile_size = 32
stride = 32
resize_to = 12

[bags]
n_instances = 5
bags_per_slide = 2

[model]
conv1_channels = 4
feature_dim = 8
attn_hidden = 4

[train]
epochs = 2
"#
        );
        std::fs::write(root.join(name), text).unwrap();
        for stage in ["tile", "bags", "train", "eval"] {
            let run = slidemil(&[stage, "--config", name], root);
            assert!(run.status.success(), "{mode} {stage}: {}", stderr_line(&run));
        }
    }
    let report = slidemil(
        &[
            "report",
            "--out-file",
            "compare.md",
            "out-masked/metrics.csv",
            "out-ws/metrics.csv",
        ],
        root,
    );
    assert!(report.status.success(), "{}", stderr_line(&report));
    let table = std::fs::read_to_string(root.join("compare.md")).unwrap();
    let rows: Vec<&str> = table
        .lines()
        .filter(|l| l.starts_with("| dlcnbc"))
        .collect();
    assert_eq!(rows.len(), 2, "one test-cohort row per run:\n{table}");
    assert!(rows.iter().any(|r| r.starts_with("| dlcnbc |")));
    assert!(rows.iter().any(|r| r.starts_with("| dlcnbc-ws |")));
}

#[test]
fn missing_inputs_fail_with_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_config(root, 3);
    // eval before anything exists
    let out = slidemil(&["eval", "--config", "run.toml"], root);
    assert!(!out.status.success());
    let line = stderr_line(&out);
    assert!(line.starts_with("error[io]:"), "got: {line}");
}

#[test]
fn stage_seed_mismatch_is_a_config_hash_error() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_config(root, 5);
    let synth = slidemil(
        &["synth", "--patients", "6", "--tile-size", "32", "--seed", "5", "--out", "data"],
        root,
    );
    assert!(synth.status.success());
    let tile = slidemil(&["tile", "--config", "run.toml"], root);
    assert!(tile.status.success(), "{}", stderr_line(&tile));
    // bags with an overridden seed no longer matches the tile manifest
    let bags = slidemil(&["bags", "--config", "run.toml", "--seed", "6"], root);
    assert!(!bags.status.success());
    let line = stderr_line(&bags);
    assert!(line.starts_with("error[config-hash]:"), "got: {line}");
}

#[test]
fn ws_mode_with_masks_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = r#"
mode = "dlcnbc-ws"

[paths]
slides = "data/slides"
masks = "data/masks"
clinical = "data/clinical.csv"
out = "out"
"#;
    std::fs::write(root.join("bad.toml"), config).unwrap();
    let out = slidemil(&["tile", "--config", "bad.toml"], root);
    assert!(!out.status.success());
    let line = stderr_line(&out);
    assert!(line.starts_with("error[config]:"), "got: {line}");
}
