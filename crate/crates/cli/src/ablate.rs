//! Ablation sweep: one design axis, a fixed set of variants per axis,
//! repeated over seeds. Every (variant, seed) cell is a full pipeline run
//! under its own run name, executed as a chain of child processes of this
//! same binary so cells are isolated and can fan out under a `--jobs`
//! cap. The product is a markdown and a JSON table of nAP50 mean and
//! standard deviation per variant; a failing cell is recorded in its row
//! while the remaining cells continue.

use std::collections::VecDeque;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::Duration;

use clap::ValueEnum;
use uofs_core::config::ExperimentConfig;
use uofs_core::error::{Error, Result};
use uofs_core::eval::EvalReport;
use uofs_core::pipeline::read_stamped;

/// Pipeline stages every cell runs, in dependency order.
const STAGES: [&str; 5] = [
    "synth-gen",
    "build-pbbs",
    "train-base",
    "finetune",
    "evaluate",
];

const POLL: Duration = Duration::from_millis(25);

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[clap(rename_all = "snake_case")]
pub enum Axis {
    /// Head feature space: cosine, euclidean, plain orthogonal, uniform
    /// orthogonal. Baselines train without the synthesized-background
    /// stream, which belongs to the uniform variant's recipe.
    FeatureSpace,
    /// Background fill of the synthesized base set.
    Background,
    /// Number of learnable unknown prototypes.
    NUnknown,
    /// Hypersphere region background magnitudes are pushed toward.
    Orientation,
    /// Class-agnostic versus class-specific box regression.
    RegMode,
    /// Attention sharing across the three head tasks.
    SadaMode,
}

impl Axis {
    fn token(self) -> &'static str {
        match self {
            Axis::FeatureSpace => "feature_space",
            Axis::Background => "background",
            Axis::NUnknown => "n_unknown",
            Axis::Orientation => "orientation",
            Axis::RegMode => "reg_mode",
            Axis::SadaMode => "sada_mode",
        }
    }

    /// Table rows: variant label plus the overrides that realize it.
    fn variants(self) -> Vec<(String, Vec<String>)> {
        let rows: Vec<(&str, Vec<&str>)> = match self {
            Axis::FeatureSpace => vec![
                ("cosine", vec!["head.kind=cosine", "train.base.alpha=1.0"]),
                (
                    "euclidean",
                    vec!["head.kind=euclidean", "train.base.alpha=1.0"],
                ),
                ("ofs", vec!["head.kind=ofs", "train.base.alpha=1.0"]),
                ("uofs", vec!["head.kind=uofs"]),
            ],
            Axis::Background => vec![
                ("pool", vec!["pbbs.kind=pool"]),
                ("fixed_gray", vec!["pbbs.kind=fixed_gray"]),
                ("normalized_gray", vec!["pbbs.kind=normalized_gray"]),
            ],
            Axis::NUnknown => vec![
                ("1", vec!["head.n_unknown=1"]),
                ("3", vec!["head.n_unknown=3"]),
                ("5", vec!["head.n_unknown=5"]),
                ("10", vec!["head.n_unknown=10"]),
            ],
            Axis::Orientation => vec![
                ("inner", vec!["head.orientation=inner"]),
                ("outer", vec!["head.orientation=outer"]),
            ],
            Axis::RegMode => vec![
                ("class_specific", vec!["model.class_agnostic_reg=false"]),
                ("class_agnostic", vec!["model.class_agnostic_reg=true"]),
            ],
            Axis::SadaMode => vec![
                ("none", vec!["model.sada_mode=none"]),
                ("unified", vec!["model.sada_mode=unified"]),
                ("sada1", vec!["model.sada_mode=sada1"]),
                ("sada2", vec!["model.sada_mode=sada2"]),
                ("sada3", vec!["model.sada_mode=sada3"]),
            ],
        };
        rows.into_iter()
            .map(|(label, over)| {
                (
                    label.to_string(),
                    over.into_iter().map(str::to_string).collect(),
                )
            })
            .collect()
    }
}

/// All stochastic stages follow a single per-cell seed.
fn seed_overrides(seed: u64) -> Vec<String> {
    vec![
        format!("data.synth.seed={seed}"),
        format!("data.split_seed={seed}"),
        format!("train.base.seed={seed}"),
        format!("train.finetune.seed={seed}"),
    ]
}

struct Cell {
    variant: String,
    seed: u64,
    name: String,
    /// Complete override list handed to every child invocation.
    overrides: Vec<String>,
    fingerprint: String,
    run_dir: PathBuf,
    log_path: PathBuf,
    stage_idx: usize,
    child: Option<Child>,
    failure: Option<CellFailure>,
}

#[derive(Debug, Clone)]
struct CellFailure {
    stage: String,
    message: String,
}

pub fn run_ablate(
    config: &Option<PathBuf>,
    base_set: &[String],
    runs_root: &Path,
    axis: Axis,
    seeds: u64,
    jobs: usize,
    force: bool,
) -> Result<()> {
    if seeds == 0 {
        return Err(Error::Config("--seeds must be >= 1".into()));
    }
    let base = ExperimentConfig::load(config.as_deref(), base_set)?;
    std::fs::create_dir_all(runs_root).map_err(|e| Error::io(runs_root, e))?;
    let runs_root = runs_root
        .canonicalize()
        .map_err(|e| Error::io(runs_root, e))?;
    let config = match config {
        Some(p) => Some(p.canonicalize().map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let exe = std::env::current_exe()
        .map_err(|e| Error::Other(format!("resolving own executable: {e}")))?;

    let out_dir = runs_root.join(&base.name).join(format!("ablate_{}", axis.token()));
    let log_dir = out_dir.join("logs");
    std::fs::create_dir_all(&log_dir).map_err(|e| Error::io(&log_dir, e))?;

    // Validate every cell's config up front: a bad axis override should
    // fail the whole command, not one cell at a time mid-sweep.
    let mut cells = Vec::new();
    for (variant, var_over) in axis.variants() {
        for seed in 1..=seeds {
            let name = format!("{}_{}_{}_s{}", base.name, axis.token(), variant, seed);
            let mut overrides = base_set.to_vec();
            overrides.extend(var_over.iter().cloned());
            overrides.extend(seed_overrides(seed));
            overrides.push(format!("name={name}"));
            let cfg = ExperimentConfig::load(config.as_deref(), &overrides)?;
            cells.push(Cell {
                variant: variant.clone(),
                seed,
                run_dir: runs_root.join(&cfg.name),
                fingerprint: cfg.fingerprint(),
                log_path: log_dir.join(format!("{}_s{}.log", variant, seed)),
                name,
                overrides,
                stage_idx: 0,
                child: None,
                failure: None,
            });
        }
    }

    let jobs = jobs.max(1);
    println!(
        "ablate {}: {} variants x {} seeds = {} cells ({} job{})",
        axis.token(),
        cells.len() / seeds as usize,
        seeds,
        cells.len(),
        jobs,
        if jobs == 1 { "" } else { "s" }
    );
    schedule(&mut cells, &exe, &config, &runs_root, jobs, force)?;

    let table = assemble(&base, axis, seeds, &cells)?;
    std::fs::write(out_dir.join("table.md"), &table.markdown)
        .map_err(|e| Error::io(out_dir.join("table.md"), e))?;
    std::fs::write(out_dir.join("table.json"), &table.json)
        .map_err(|e| Error::io(out_dir.join("table.json"), e))?;
    print!("{}", table.markdown);
    println!("table: {}", out_dir.join("table.md").display());
    if table.n_values == 0 {
        return Err(Error::Other(
            "every ablation cell failed; see the logs listed above".into(),
        ));
    }
    Ok(())
}

/// Run each cell's stage chain, at most `jobs` cells in flight.
fn schedule(
    cells: &mut [Cell],
    exe: &Path,
    config: &Option<PathBuf>,
    runs_root: &Path,
    jobs: usize,
    force: bool,
) -> Result<()> {
    let mut pending: VecDeque<usize> = (0..cells.len()).collect();
    let mut running: Vec<usize> = Vec::new();
    while !pending.is_empty() || !running.is_empty() {
        while running.len() < jobs {
            let Some(i) = pending.pop_front() else { break };
            spawn_stage(&mut cells[i], exe, config, runs_root, force)?;
            running.push(i);
        }
        std::thread::sleep(POLL);
        let mut still = Vec::with_capacity(running.len());
        for i in running {
            let cell = &mut cells[i];
            let child = cell.child.as_mut().expect("running cell has a child");
            match child.try_wait() {
                Ok(None) => still.push(i),
                Ok(Some(status)) if status.success() => {
                    cell.child = None;
                    cell.stage_idx += 1;
                    if cell.stage_idx < STAGES.len() {
                        spawn_stage(cell, exe, config, runs_root, force)?;
                        still.push(i);
                    } else {
                        println!("  [{} s{}] done", cell.variant, cell.seed);
                    }
                }
                Ok(Some(status)) => {
                    cell.child = None;
                    let stage = STAGES[cell.stage_idx];
                    let message = format!(
                        "{} exited with {} (log: {})",
                        stage,
                        status.code().map_or("signal".into(), |c| c.to_string()),
                        cell.log_path.display()
                    );
                    println!("  [{} s{}] FAILED: {message}", cell.variant, cell.seed);
                    cell.failure = Some(CellFailure {
                        stage: stage.into(),
                        message,
                    });
                }
                Err(e) => {
                    cell.child = None;
                    cell.failure = Some(CellFailure {
                        stage: STAGES[cell.stage_idx].into(),
                        message: format!("waiting on child: {e}"),
                    });
                }
            }
        }
        running = still;
    }
    Ok(())
}

fn spawn_stage(
    cell: &mut Cell,
    exe: &Path,
    config: &Option<PathBuf>,
    runs_root: &Path,
    force: bool,
) -> Result<()> {
    let log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&cell.log_path)
        .map_err(|e| Error::io(&cell.log_path, e))?;
    let log_err = log.try_clone().map_err(|e| Error::io(&cell.log_path, e))?;
    let mut cmd = Command::new(exe);
    cmd.arg(STAGES[cell.stage_idx])
        .arg("--runs-dir")
        .arg(runs_root)
        .stdin(Stdio::null())
        .stdout(Stdio::from(log))
        .stderr(Stdio::from(log_err));
    if let Some(path) = config {
        cmd.arg("--config").arg(path);
    }
    for o in &cell.overrides {
        cmd.arg("--set").arg(o);
    }
    if force {
        cmd.arg("--force");
    }
    let child = cmd
        .spawn()
        .map_err(|e| Error::Other(format!("spawning {}: {e}", exe.display())))?;
    cell.child = Some(child);
    Ok(())
}

struct Table {
    markdown: String,
    json: String,
    /// Count of cells that produced an nAP50 value.
    n_values: usize,
}

fn assemble(base: &ExperimentConfig, axis: Axis, seeds: u64, cells: &[Cell]) -> Result<Table> {
    use std::fmt::Write as _;

    let mut rows = Vec::new();
    let mut n_values = 0usize;
    for (variant, _) in axis.variants() {
        let mut values: Vec<f64> = Vec::new();
        let mut cell_docs = Vec::new();
        for cell in cells.iter().filter(|c| c.variant == variant) {
            let (nap50, failure) = match &cell.failure {
                Some(f) => (None, Some(f.clone())),
                None => {
                    let path = cell.run_dir.join("evaluate").join("report.json");
                    let report: EvalReport = read_stamped(&path, Some(&cell.fingerprint))?;
                    match report.nap50 {
                        Some(v) => (Some(v), None),
                        None => (
                            None,
                            Some(CellFailure {
                                stage: "evaluate".into(),
                                message: "nAP50 undefined: no novel ground truth".into(),
                            }),
                        ),
                    }
                }
            };
            if let Some(v) = nap50 {
                values.push(v);
                n_values += 1;
            }
            cell_docs.push(serde_json::json!({
                "seed": cell.seed,
                "run": cell.name,
                "nap50": nap50,
                "failure": failure.as_ref().map(|f| serde_json::json!({
                    "stage": f.stage,
                    "message": f.message,
                })),
            }));
        }
        let (mean, std) = mean_std(&values);
        rows.push((variant, values, mean, std, cell_docs));
    }

    let mut md = String::new();
    writeln!(
        md,
        "# Ablation: {} (k={}, {} seed{})\n",
        axis.token(),
        base.data.k_shots,
        seeds,
        if seeds == 1 { "" } else { "s" }
    )
    .unwrap();
    writeln!(md, "| {} | nAP50 | std | cells |", axis.token()).unwrap();
    writeln!(md, "|---|---|---|---|").unwrap();
    for (variant, values, mean, std, cell_docs) in &rows {
        let cell_note = if values.len() == cell_docs.len() {
            format!("{}/{}", values.len(), cell_docs.len())
        } else {
            let failed: Vec<String> = cell_docs
                .iter()
                .filter(|c| !c["failure"].is_null())
                .map(|c| format!("s{} {}", c["seed"], c["failure"]["stage"].as_str().unwrap_or("?")))
                .collect();
            format!(
                "{}/{} (failed: {})",
                values.len(),
                cell_docs.len(),
                failed.join(", ")
            )
        };
        writeln!(
            md,
            "| {} | {} | {} | {} |",
            variant,
            mean.map_or("n/a".into(), |m| format!("{m:.4}")),
            std.map_or("n/a".into(), |s| format!("{s:.4}")),
            cell_note
        )
        .unwrap();
    }

    let json_doc = serde_json::json!({
        "axis": axis.token(),
        "k_shots": base.data.k_shots,
        "seeds": (1..=seeds).collect::<Vec<u64>>(),
        "rows": rows.iter().map(|(variant, values, mean, std, cell_docs)| {
            serde_json::json!({
                "variant": variant,
                "nap50_mean": mean,
                "nap50_std": std,
                "values": values,
                "cells": cell_docs,
            })
        }).collect::<Vec<_>>(),
    });
    let json = serde_json::to_string_pretty(&json_doc)
        .map_err(|e| Error::Other(format!("serializing ablation table: {e}")))?;
    Ok(Table {
        markdown: md,
        json,
        n_values,
    })
}

/// Mean and population standard deviation; a single value has std 0.
fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}
