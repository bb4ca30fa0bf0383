//! Stage orchestration over one run directory.
//!
//! Every stage owns `<runs root>/<name>/<stage>/`, writes its outputs plus
//! a completion marker stamped with the config fingerprint, and snapshots
//! the resolved config. Completed stages are skipped unless forced;
//! artifacts produced under a different fingerprint are refused rather
//! than silently mixed. Dependency checks name the command that produces
//! the missing artifact.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::split::{base_visible, finetune_set, make_split};
use crate::data::store::{load_dataset, save_dataset};
use crate::data::synth::generate_synthetic;
use crate::data::{ClassId, Dataset, FewShotSplit};
use crate::error::{Error, Result};
use crate::eval::{self, DiagnosticsReport, EvalReport};
use crate::model::{DetectorModel, Normalization};
use crate::plot;
use crate::train::{
    finetune, load_checkpoint, save_checkpoint, train_base, ClassIndex, MetricsSink, Sgd,
    StepMetrics,
};
use crate::Real;

const MARKER: &str = "stage.json";
const CONFIG_SNAPSHOT: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    /// The stage was already complete under the current fingerprint.
    UpToDate,
}

#[derive(Debug, Serialize, Deserialize)]
struct StageMarker {
    stage: String,
    config_fingerprint: String,
}

/// JSON artifact wrapper carrying the producing fingerprint.
#[derive(Debug, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_fingerprint: String,
    pub payload: T,
}

pub fn write_stamped<T: Serialize>(path: &Path, fingerprint: &str, payload: &T) -> Result<()> {
    let doc = Stamped {
        config_fingerprint: fingerprint.to_string(),
        payload,
    };
    let text = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Other(format!("serializing {}: {e}", path.display())))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Read a stamped artifact, refusing a fingerprint mismatch when
/// `expected` is given.
pub fn read_stamped<T: DeserializeOwned>(path: &Path, expected: Option<&str>) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: Stamped<T> = serde_json::from_str(&text)
        .map_err(|e| Error::Other(format!("parsing {}: {e}", path.display())))?;
    if let Some(current) = expected {
        if doc.config_fingerprint != current {
            return Err(Error::FingerprintMismatch {
                artifact: doc.config_fingerprint,
                current: current.to_string(),
            });
        }
    }
    Ok(doc.payload)
}

/// Which checkpoint diagnostics reads. The base checkpoint shows the
/// magnitude structure that hybrid background training shapes; the
/// fine-tuned one includes novel columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagnoseSource {
    Base,
    Finetune,
}

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub fingerprint: String,
    root: PathBuf,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, runs_root: &Path) -> Pipeline {
        let fingerprint = cfg.fingerprint();
        let root = runs_root.join(&cfg.name);
        Pipeline {
            cfg,
            fingerprint,
            root,
        }
    }

    pub fn run_dir(&self) -> &Path {
        &self.root
    }

    pub fn synth_dir(&self) -> PathBuf {
        self.root.join("synth")
    }

    pub fn pbbs_dir(&self) -> PathBuf {
        self.root.join("pbbs")
    }

    pub fn train_base_dir(&self) -> PathBuf {
        self.root.join("train_base")
    }

    pub fn finetune_dir(&self) -> PathBuf {
        self.root.join("finetune")
    }

    pub fn evaluate_dir(&self) -> PathBuf {
        self.root.join("evaluate")
    }

    pub fn diagnose_dir(&self) -> PathBuf {
        self.root.join("diagnose")
    }

    /// Returns `None` when the stage must run; wipes stale output first.
    fn enter_stage(&self, dir: &Path, force: bool) -> Result<Option<StageOutcome>> {
        let marker = dir.join(MARKER);
        if marker.exists() && !force {
            let text = std::fs::read_to_string(&marker).map_err(|e| Error::io(&marker, e))?;
            let parsed: StageMarker = serde_json::from_str(&text)
                .map_err(|e| Error::Other(format!("parsing {}: {e}", marker.display())))?;
            if parsed.config_fingerprint == self.fingerprint {
                return Ok(Some(StageOutcome::UpToDate));
            }
            return Err(Error::FingerprintMismatch {
                artifact: parsed.config_fingerprint,
                current: self.fingerprint.clone(),
            });
        }
        if dir.exists() {
            std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(None)
    }

    fn finish_stage(&self, dir: &Path, stage: &str) -> Result<()> {
        std::fs::write(dir.join(CONFIG_SNAPSHOT), self.cfg.to_toml())
            .map_err(|e| Error::io(dir.join(CONFIG_SNAPSHOT), e))?;
        let marker = StageMarker {
            stage: stage.to_string(),
            config_fingerprint: self.fingerprint.clone(),
        };
        let text = serde_json::to_string_pretty(&marker).expect("marker serializes");
        std::fs::write(dir.join(MARKER), text).map_err(|e| Error::io(dir.join(MARKER), e))
    }

    /// Dependency gate: the producing stage must be complete under the
    /// current fingerprint. `command` names the CLI step that creates it.
    fn require_stage(&self, dir: &Path, command: &str) -> Result<()> {
        let marker = dir.join(MARKER);
        if !marker.exists() {
            return Err(Error::MissingDependency {
                command: command.to_string(),
                detail: format!("no completed stage at {}", dir.display()),
            });
        }
        let text = std::fs::read_to_string(&marker).map_err(|e| Error::io(&marker, e))?;
        let parsed: StageMarker = serde_json::from_str(&text)
            .map_err(|e| Error::Other(format!("parsing {}: {e}", marker.display())))?;
        if parsed.config_fingerprint != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                artifact: parsed.config_fingerprint,
                current: self.fingerprint.clone(),
            });
        }
        Ok(())
    }

    fn load_split(&self) -> Result<FewShotSplit> {
        let path = self.synth_dir().join("split.json");
        read_stamped(&path, Some(&self.fingerprint))
    }

    fn load_train(&self) -> Result<Dataset> {
        load_dataset(&self.synth_dir().join("train"))
    }

    fn load_test(&self) -> Result<Dataset> {
        load_dataset(&self.synth_dir().join("test"))
    }

    /// Generate the image series, split it into train/test, and draw the
    /// k-shot novel sample from the train part.
    pub fn synth(&self, force: bool) -> Result<StageOutcome> {
        let dir = self.synth_dir();
        if let Some(done) = self.enter_stage(&dir, force)? {
            return Ok(done);
        }
        let data = &self.cfg.data;
        let all = generate_synthetic(&data.synth, data.n_train + data.n_test)?;
        let mut images = all.images;
        let test_images = images.split_off(data.n_train);
        let train = Dataset {
            images,
            classes: all.classes.clone(),
        };
        let test = Dataset {
            images: test_images,
            classes: all.classes,
        };
        let split = make_split(&train, &data.novel_classes(), data.k_shots, data.split_seed)?;
        save_dataset(&train, &dir.join("train"))?;
        save_dataset(&test, &dir.join("test"))?;
        write_stamped(&dir.join("split.json"), &self.fingerprint, &split)?;
        self.finish_stage(&dir, "synth")?;
        Ok(StageOutcome::Ran)
    }

    /// Compose the synthesized-background copy of the base-visible train
    /// set. Novel instances are hidden before composition, so no novel
    /// pixel survives into the background-supervision stream.
    pub fn build_pbbs(&self, force: bool) -> Result<StageOutcome> {
        self.require_stage(&self.synth_dir(), "synth-gen")?;
        let dir = self.pbbs_dir();
        if let Some(done) = self.enter_stage(&dir, force)? {
            return Ok(done);
        }
        let train = self.load_train()?;
        let split = self.load_split()?;
        let base = base_visible(&train, &split);
        crate::pbbs::build_pbbs_dataset(&base, &self.cfg.pbbs, &dir)?;
        self.finish_stage(&dir, "pbbs")?;
        Ok(StageOutcome::Ran)
    }

    /// Base training on the base-visible train set, blended with the
    /// synthesized-background stream. Emits the checkpoint, step metrics,
    /// a loss curve, and a base-class evaluation summary on the test set.
    pub fn train_base(&self, force: bool) -> Result<StageOutcome> {
        self.require_stage(&self.synth_dir(), "synth-gen")?;
        if self.cfg.train.base.alpha < 1.0 {
            self.require_stage(&self.pbbs_dir(), "build-pbbs")?;
        }
        let dir = self.train_base_dir();
        if let Some(done) = self.enter_stage(&dir, force)? {
            return Ok(done);
        }
        let train = self.load_train()?;
        let split = self.load_split()?;
        let base = base_visible(&train, &split);
        let pbbs = if self.cfg.train.base.alpha < 1.0 {
            Some(load_dataset(&self.pbbs_dir())?)
        } else {
            None
        };
        let index = ClassIndex::from_sorted(base.classes.keys().copied());
        let (mean, std) = base.channel_stats();
        let mut model: DetectorModel<Real> = DetectorModel::new(
            self.cfg.model.clone(),
            self.cfg.head.kind,
            self.cfg.head.orientation,
            self.cfg.head.tau,
            index.len(),
            self.cfg.head.n_unknown,
            Normalization { mean, std },
            self.cfg.train.base.seed,
        )?;
        let mut sgd = Sgd::new();
        let metrics_path = dir.join("metrics.jsonl");
        let mut sink = MetricsSink::to_file(&metrics_path)?;
        let report = train_base(
            &mut model,
            &mut sgd,
            &base,
            pbbs.as_ref(),
            &self.cfg.train.base,
            &index,
            0,
            &mut sink,
        )?;
        save_checkpoint(
            &mut model,
            &sgd,
            report.final_step,
            &self.fingerprint,
            &index,
            &dir.join("checkpoint.json"),
        )?;
        loss_curve(&report.metrics, &dir.join("loss_curve.png"))?;
        // Base-class detection summary: the test set as base training sees
        // it, no novel classes in play.
        let test_base = base_visible(&self.load_test()?, &split);
        let (summary, _) = eval::evaluate(
            &model,
            &test_base,
            &BTreeSet::new(),
            &index,
            &self.cfg.eval,
        )?;
        write_stamped(&dir.join("base_eval.json"), &self.fingerprint, &summary)?;
        self.finish_stage(&dir, "train_base")?;
        Ok(StageOutcome::Ran)
    }

    /// Imprint novel class columns from the k-shot support set and
    /// fine-tune the unfrozen parameters on it.
    pub fn finetune(&self, force: bool) -> Result<StageOutcome> {
        self.require_stage(&self.train_base_dir(), "train-base")?;
        let dir = self.finetune_dir();
        if let Some(done) = self.enter_stage(&dir, force)? {
            return Ok(done);
        }
        let (mut model, _, doc) = self.load_model(&self.train_base_dir())?;
        let train = self.load_train()?;
        let split = self.load_split()?;
        let support = finetune_set(&train, &split, self.cfg.data.split_seed)?;
        let novel: Vec<ClassId> = split.novel_classes.iter().copied().collect();
        let mut index = doc.class_index.clone();
        let mut sgd = Sgd::new();
        let mut sink = MetricsSink::to_file(&dir.join("metrics.jsonl"))?;
        let report = finetune(
            &mut model,
            &mut sgd,
            &support,
            &novel,
            &self.cfg.train.finetune,
            &mut index,
            &mut sink,
        )?;
        save_checkpoint(
            &mut model,
            &sgd,
            report.final_step,
            &self.fingerprint,
            &index,
            &dir.join("checkpoint.json"),
        )?;
        loss_curve(&report.metrics, &dir.join("loss_curve.png"))?;
        self.finish_stage(&dir, "finetune")?;
        Ok(StageOutcome::Ran)
    }

    /// Detection metrics and silhouette on the full-label test set with
    /// the fine-tuned checkpoint. Returns the report either way; an
    /// up-to-date stage reloads it from disk.
    pub fn evaluate(&self, force: bool) -> Result<(StageOutcome, EvalReport)> {
        self.require_stage(&self.train_base_dir(), "train-base")?;
        self.require_stage(&self.finetune_dir(), "finetune")?;
        let dir = self.evaluate_dir();
        let report_path = dir.join("report.json");
        if let Some(done) = self.enter_stage(&dir, force)? {
            let report = read_stamped(&report_path, Some(&self.fingerprint))?;
            return Ok((done, report));
        }
        let (model, _, doc) = self.load_model(&self.finetune_dir())?;
        let test = self.load_test()?;
        let novel = self.cfg.data.novel_classes();
        let (report, detections) =
            eval::evaluate(&model, &test, &novel, &doc.class_index, &self.cfg.eval)?;
        write_stamped(&report_path, &self.fingerprint, &report)?;
        write_stamped(&dir.join("detections.json"), &self.fingerprint, &detections)?;
        self.finish_stage(&dir, "evaluate")?;
        Ok((StageOutcome::Ran, report))
    }

    /// Feature-space diagnostics and attention plots for one checkpoint.
    /// The base source reads the test set as base training saw it, which
    /// keeps hidden novel instances in the unlabeled group.
    pub fn diagnose(
        &self,
        source: DiagnoseSource,
        force: bool,
    ) -> Result<(StageOutcome, DiagnosticsReport)> {
        self.require_stage(&self.train_base_dir(), "train-base")?;
        if source == DiagnoseSource::Finetune {
            self.require_stage(&self.finetune_dir(), "finetune")?;
        }
        let dir = self.diagnose_dir();
        let report_path = dir.join("diagnostics.json");
        if let Some(done) = self.enter_stage(&dir, force)? {
            let report = read_stamped(&report_path, Some(&self.fingerprint))?;
            return Ok((done, report));
        }
        let split = self.load_split()?;
        let test = self.load_test()?;
        let (model, _, doc, dataset) = match source {
            DiagnoseSource::Base => {
                let (m, s, d) = self.load_model(&self.train_base_dir())?;
                (m, s, d, base_visible(&test, &split))
            }
            DiagnoseSource::Finetune => {
                let (m, s, d) = self.load_model(&self.finetune_dir())?;
                (m, s, d, test)
            }
        };
        let novel = self.cfg.data.novel_classes();
        let report = eval::diagnostics(
            &model,
            &dataset,
            &novel,
            &doc.class_index,
            &self.cfg.eval,
            &dir.join("plots"),
        )?;
        write_stamped(&report_path, &self.fingerprint, &report)?;
        self.finish_stage(&dir, "diagnose")?;
        Ok((StageOutcome::Ran, report))
    }

    fn load_model(
        &self,
        stage_dir: &Path,
    ) -> Result<(DetectorModel<Real>, Sgd, crate::train::Checkpoint)> {
        let (model, sgd, doc) = load_checkpoint::<Real>(&stage_dir.join("checkpoint.json"))?;
        if doc.config_fingerprint != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                artifact: doc.config_fingerprint,
                current: self.fingerprint.clone(),
            });
        }
        Ok((model, sgd, doc))
    }
}

fn loss_curve(metrics: &[StepMetrics], path: &Path) -> Result<()> {
    if metrics.is_empty() {
        return Ok(());
    }
    let xs: Vec<f64> = metrics.iter().map(|m| m.step as f64).collect();
    let ys: Vec<f64> = metrics.iter().map(|m| m.l_det).collect();
    plot::save_curve(path, &xs, &ys, [180, 60, 40])
}
