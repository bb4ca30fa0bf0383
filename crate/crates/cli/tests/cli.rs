//! End-to-end checks of the installed binary: exit codes, dependency
//! messages, config snapshots, stage reruns, and the ablation table.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_uofs"))
}

/// A configuration small enough that every stage finishes in well under a
/// second: tiny images, a coarse proposal grid, a handful of iterations.
fn desk_sets(name: &str) -> Vec<String> {
    [
        &format!("name={name}"),
        "data.synth.n_base_classes=3",
        "data.synth.n_novel_classes=1",
        "data.synth.image_size=32",
        "data.synth.instances_min=2",
        "data.synth.instances_max=3",
        "data.n_train=8",
        "data.n_test=3",
        "data.k_shots=1",
        "model.channels_per_stage=[4, 8]",
        "model.head_channels=8",
        "model.feat_dim=16",
        "model.roi_grid=3",
        "train.base.iterations=6",
        "train.finetune.iterations=3",
        "eval.scales=[0.3]",
        "eval.coco_ap=false",
    ]
    .iter()
    .flat_map(|s| ["--set".to_string(), s.to_string()])
    .collect()
}

fn run(stage: &str, runs_dir: &Path, sets: &[String], extra: &[&str]) -> Output {
    bin()
        .arg(stage)
        .arg("--runs-dir")
        .arg(runs_dir)
        .args(sets)
        .args(extra)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output, context: &str) {
    assert!(
        out.status.success(),
        "{context} failed: {}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn evaluate_before_training_exits_2_naming_train_base() {
    let root = tempfile::tempdir().unwrap();
    let sets = desk_sets("dep");
    let out = run("evaluate", root.path(), &sets, &[]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("train-base"), "stderr: {stderr}");
}

#[test]
fn unknown_config_key_exits_2() {
    let root = tempfile::tempdir().unwrap();
    let mut sets = desk_sets("typo");
    sets.extend(["--set".into(), "head.taau=25".into()]);
    let out = run("synth-gen", root.path(), &sets, &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn set_override_lands_in_config_snapshot() {
    let root = tempfile::tempdir().unwrap();
    let mut sets = desk_sets("snap");
    sets.extend(["--set".into(), "head.tau=25".into()]);
    let out = run("synth-gen", root.path(), &sets, &[]);
    assert_ok(&out, "synth-gen");
    let snapshot =
        std::fs::read_to_string(root.path().join("snap").join("synth").join("config.toml"))
            .unwrap();
    assert!(snapshot.contains("tau = 25"), "snapshot: {snapshot}");
}

#[test]
fn full_chain_writes_report_and_reruns_are_noops() {
    let root = tempfile::tempdir().unwrap();
    let sets = desk_sets("chain");
    for stage in ["synth-gen", "build-pbbs", "train-base", "finetune", "evaluate"] {
        let out = run(stage, root.path(), &sets, &[]);
        assert_ok(&out, stage);
    }
    let report_path = root
        .path()
        .join("chain")
        .join("evaluate")
        .join("report.json");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!(report["config_fingerprint"].is_string());
    assert!(report["payload"]["per_class"].is_array());

    let out = run("evaluate", root.path(), &sets, &[]);
    assert_ok(&out, "evaluate rerun");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("up to date"), "stdout: {stdout}");

    let out = run("diagnose", root.path(), &sets, &["--source", "finetune"]);
    assert_ok(&out, "diagnose");
    assert!(root
        .path()
        .join("chain")
        .join("diagnose")
        .join("diagnostics.json")
        .exists());
}

#[test]
fn changed_config_is_refused_until_forced() {
    let root = tempfile::tempdir().unwrap();
    let sets = desk_sets("refuse");
    assert_ok(&run("synth-gen", root.path(), &sets, &[]), "synth-gen");
    let mut changed = sets.clone();
    changed.extend(["--set".into(), "head.tau=25".into()]);
    let out = run("synth-gen", root.path(), &changed, &[]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("fingerprint"), "stderr: {stderr}");
    assert_ok(
        &run("synth-gen", root.path(), &changed, &["--force"]),
        "forced rebuild",
    );
}

#[test]
fn ablate_single_seed_table_has_zero_stds() {
    let root = tempfile::tempdir().unwrap();
    let sets = desk_sets("abl");
    let out = run(
        "ablate",
        root.path(),
        &sets,
        &["--axis", "orientation", "--seeds", "1", "--jobs", "2"],
    );
    assert_ok(&out, "ablate");
    let table_dir = root.path().join("abl").join("ablate_orientation");
    assert!(table_dir.join("table.md").exists());
    let table: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(table_dir.join("table.json")).unwrap())
            .unwrap();
    let rows = table["rows"].as_array().unwrap();
    let variants: Vec<&str> = rows
        .iter()
        .map(|r| r["variant"].as_str().unwrap())
        .collect();
    assert_eq!(variants, ["inner", "outer"]);
    for row in rows {
        assert_eq!(row["nap50_std"].as_f64(), Some(0.0));
        assert_eq!(row["values"].as_array().unwrap().len(), 1);
    }
}

#[test]
fn ablate_records_failing_cells_and_continues() {
    let root = tempfile::tempdir().unwrap();
    // No pbbs.pool_dir configured, so the `pool` background variant fails
    // in build-pbbs; the gray variants must still produce values.
    let sets = desk_sets("bg");
    let out = run(
        "ablate",
        root.path(),
        &sets,
        &["--axis", "background", "--seeds", "1"],
    );
    assert_ok(&out, "ablate");
    let table: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(
            root.path()
                .join("bg")
                .join("ablate_background")
                .join("table.json"),
        )
        .unwrap(),
    )
    .unwrap();
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0]["variant"], "pool");
    assert_eq!(
        rows[0]["cells"][0]["failure"]["stage"].as_str(),
        Some("build-pbbs")
    );
    for row in &rows[1..] {
        assert!(row["nap50_mean"].is_number(), "row: {row}");
    }
}

#[test]
fn runs_dir_env_var_sets_the_root() {
    let root = tempfile::tempdir().unwrap();
    let sets = desk_sets("envroot");
    let out = bin()
        .arg("synth-gen")
        .env("UOFS_RUNS_DIR", root.path())
        .args(&sets)
        .output()
        .expect("binary runs");
    assert_ok(&out, "synth-gen via env");
    assert!(root.path().join("envroot").join("synth").exists());
}
