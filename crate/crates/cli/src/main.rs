//! Command-line driver: one subcommand per pipeline stage plus an
//! ablation sweep. Artifacts land under `<runs root>/<name>/<stage>/`;
//! the runs root comes from `--runs-dir`, then the `UOFS_RUNS_DIR`
//! environment variable, then `./runs`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use uofs_core::config::ExperimentConfig;
use uofs_core::error::Result;
use uofs_core::eval::{DiagnosticsReport, EvalReport};
use uofs_core::pipeline::{DiagnoseSource, Pipeline, StageOutcome};

mod ablate;

#[derive(Parser)]
#[command(
    name = "uofs",
    version,
    about = "Few-shot object detection in a uniform orthogonal feature space"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every stage command.
#[derive(Args)]
struct RunArgs {
    /// Experiment config file (TOML); built-in defaults when omitted.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Dotted-key config override, e.g. `--set head.tau=25`. Repeatable;
    /// later flags win.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Rebuild the stage even if it is complete under this config.
    #[arg(long)]
    force: bool,
    /// Runs root (default `./runs`, or `UOFS_RUNS_DIR` when set).
    #[arg(long, value_name = "DIR")]
    runs_dir: Option<PathBuf>,
}

impl RunArgs {
    fn runs_root(&self) -> PathBuf {
        self.runs_dir
            .clone()
            .or_else(|| std::env::var_os("UOFS_RUNS_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    fn pipeline(&self) -> Result<Pipeline> {
        let cfg = ExperimentConfig::load(self.config.as_deref(), &self.set)?;
        Ok(Pipeline::new(cfg, &self.runs_root()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SourceArg {
    /// The base-training checkpoint, test set with novel labels hidden.
    Base,
    /// The fine-tuned checkpoint, test set fully labeled.
    Finetune,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and the few-shot split.
    SynthGen(RunArgs),
    /// Compose the pure-background copy of the train set.
    BuildPbbs(RunArgs),
    /// Train on base classes with the blended objective.
    TrainBase(RunArgs),
    /// Imprint novel prototypes and fine-tune on the k-shot support set.
    Finetune(RunArgs),
    /// Detection metrics and silhouette scores on the test set.
    Evaluate(RunArgs),
    /// Feature-space diagnostics: magnitude groups, prototype angles,
    /// attention overlays.
    Diagnose {
        #[command(flatten)]
        run: RunArgs,
        /// Which checkpoint to inspect.
        #[arg(long, value_enum, default_value_t = SourceArg::Base)]
        source: SourceArg,
    },
    /// Sweep one design axis across seeds and tabulate nAP50.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Design axis to vary; each value is one table row.
        #[arg(long, value_enum)]
        axis: ablate::Axis,
        /// Seeds per variant; data, split, and training seeds all follow.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Maximum concurrently running variant pipelines.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code().clamp(0, 255) as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::SynthGen(run) => {
            let p = run.pipeline()?;
            let outcome = p.synth(run.force)?;
            report_outcome("synth-gen", &p, outcome, &p.synth_dir());
        }
        Command::BuildPbbs(run) => {
            let p = run.pipeline()?;
            let outcome = p.build_pbbs(run.force)?;
            report_outcome("build-pbbs", &p, outcome, &p.pbbs_dir());
        }
        Command::TrainBase(run) => {
            let p = run.pipeline()?;
            let outcome = p.train_base(run.force)?;
            report_outcome("train-base", &p, outcome, &p.train_base_dir());
        }
        Command::Finetune(run) => {
            let p = run.pipeline()?;
            let outcome = p.finetune(run.force)?;
            report_outcome("finetune", &p, outcome, &p.finetune_dir());
        }
        Command::Evaluate(run) => {
            let p = run.pipeline()?;
            let (outcome, report) = p.evaluate(run.force)?;
            report_outcome("evaluate", &p, outcome, &p.evaluate_dir());
            print_eval(&report);
        }
        Command::Diagnose { run, source } => {
            let p = run.pipeline()?;
            let source = match source {
                SourceArg::Base => DiagnoseSource::Base,
                SourceArg::Finetune => DiagnoseSource::Finetune,
            };
            let (outcome, report) = p.diagnose(source, run.force)?;
            report_outcome("diagnose", &p, outcome, &p.diagnose_dir());
            print_diagnostics(&report, &p);
        }
        Command::Ablate {
            run,
            axis,
            seeds,
            jobs,
        } => ablate::run_ablate(&run.config, &run.set, &run.runs_root(), axis, seeds, jobs, run.force)?,
    }
    Ok(())
}

fn report_outcome(stage: &str, p: &Pipeline, outcome: StageOutcome, dir: &std::path::Path) {
    match outcome {
        StageOutcome::Ran => println!("{stage}: wrote {} [{}]", dir.display(), p.fingerprint),
        StageOutcome::UpToDate => println!(
            "{stage}: up to date at {} [{}] (pass --force to rebuild)",
            dir.display(),
            p.fingerprint
        ),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "n/a".into(),
    }
}

fn print_eval(report: &EvalReport) {
    println!(
        "  images {}  detections {}",
        report.n_images, report.n_detections
    );
    println!("  nAP50      {}", fmt_opt(report.nap50));
    println!("  bAP50      {}", fmt_opt(report.bap50));
    println!("  nAP50:95   {}", fmt_opt(report.nap5095));
    println!("  nAP75      {}", fmt_opt(report.nap75));
    println!("  SC base    {}", fmt_opt(report.silhouette_base));
    println!("  SC all     {}", fmt_opt(report.silhouette_all));
    for c in &report.per_class {
        println!(
            "  class {:>3}  AP {}  gt {}  det {}",
            c.class_id,
            fmt_opt(c.ap),
            c.n_gt,
            c.n_det
        );
    }
    if !report.zero_gt_classes.is_empty() {
        println!("  no ground truth for classes {:?}", report.zero_gt_classes);
    }
}

fn print_diagnostics(report: &DiagnosticsReport, p: &Pipeline) {
    println!("  {:<24} {:>6} {:>10} {:>10}", "group", "n", "mean ‖f‖", "std");
    for g in &report.magnitude {
        println!(
            "  {:<24} {:>6} {:>10.4} {:>10.4}",
            g.group, g.n, g.mean, g.std
        );
    }
    if let Some(cos) = &report.cosine_to_prototype {
        println!(
            "  cosine to own prototype: mean {:.4} over {} boxes",
            cos.mean, cos.n
        );
    }
    println!("  SC base    {}", fmt_opt(report.silhouette_base));
    println!("  SC all     {}", fmt_opt(report.silhouette_all));
    println!("  attention values in (0,1): {}", report.heatmap_range_ok);
    println!(
        "  {} plots under {}",
        report.plots.len(),
        p.diagnose_dir().join("plots").display()
    );
}
