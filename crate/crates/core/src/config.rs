//! Experiment configuration: one TOML document with nested sections per
//! pipeline stage, dotted-key overrides, and a stable fingerprint.
//!
//! Precedence is override > file > defaults. Overrides are applied to the
//! TOML value tree before deserialization so `deny_unknown_fields` on every
//! section catches typos in files and on the command line alike. The
//! fingerprint hashes the fully resolved document; artifacts stamp it so
//! stages refuse to mix outputs from different configurations.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::synth::SynthConfig;
use crate::data::ClassId;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::heads::{HeadKind, Orientation};
use crate::model::ModelConfig;
use crate::pbbs::BackgroundSpec;
use crate::train::TrainConfig;

/// Benchmark data: one synthetic image series split into a train prefix
/// and a test suffix, plus the few-shot split drawn from the train part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub synth: SynthConfig,
    pub n_train: usize,
    pub n_test: usize,
    /// Labeled instances per novel class available for fine-tuning.
    pub k_shots: usize,
    /// Seed for drawing the k-shot sample (independent of image content).
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            synth: SynthConfig::default(),
            n_train: 200,
            n_test: 50,
            k_shots: 2,
            split_seed: 1,
        }
    }
}

impl DataConfig {
    /// Novel classes by construction: the generator assigns the last
    /// `n_novel_classes` ids of the vocabulary to the novel role.
    pub fn novel_classes(&self) -> BTreeSet<ClassId> {
        let base = self.synth.n_base_classes as ClassId;
        let all = self.synth.n_classes() as ClassId;
        (base..all).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config(
                "data.n_train and data.n_test must be at least 1".into(),
            ));
        }
        if self.k_shots == 0 {
            return Err(Error::Config("data.k_shots must be at least 1".into()));
        }
        if self.synth.n_novel_classes == 0 {
            return Err(Error::Config(
                "data.synth.n_novel_classes must be at least 1 for the few-shot pipeline".into(),
            ));
        }
        Ok(())
    }
}

/// Probability head shape and temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub orientation: Orientation,
    pub tau: f64,
    pub n_unknown: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            kind: HeadKind::Uofs,
            orientation: Orientation::Outer,
            tau: 20.0,
            n_unknown: 5,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!(
                "head.tau must be positive, got {}",
                self.tau
            )));
        }
        if self.n_unknown == 0 {
            return Err(Error::Config("head.n_unknown must be at least 1".into()));
        }
        Ok(())
    }
}

/// Base training and fine-tuning settings. Fine-tuning always runs on the
/// support set alone, so its blend weight is forced to 1 at runtime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub base: TrainConfig,
    pub finetune: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            base: TrainConfig::default(),
            finetune: TrainConfig {
                iterations: 150,
                lr: 0.005,
                alpha: 1.0,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Run name; outputs land under `<runs root>/<name>/`.
    pub name: String,
    pub data: DataConfig,
    pub pbbs: BackgroundSpec,
    pub model: ModelConfig,
    pub head: HeadConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "default".into(),
            data: DataConfig::default(),
            pbbs: BackgroundSpec::default(),
            model: ModelConfig::default(),
            head: HeadConfig::default(),
            train: TrainSection::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Resolve a config: defaults, overlaid by `path` when given, then the
    /// dotted `key=value` overrides, then validated.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let file: toml::Value = toml::from_str(&text).map_err(|e| {
                    Error::Config(format!("cannot parse {}: {e}", p.display()))
                })?;
                let defaults = to_value(&ExperimentConfig::default())?;
                merge(defaults, file)
            }
            None => to_value(&ExperimentConfig::default())?,
        };
        for spec in overrides {
            let (key, raw) = spec.split_once('=').ok_or_else(|| {
                Error::Config(format!("override `{spec}` is not of the form key=value"))
            })?;
            set_dotted(&mut value, key.trim(), raw.trim())?;
        }
        let cfg: ExperimentConfig = value.try_into().map_err(|e| {
            Error::Config(format!("invalid configuration: {e}"))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return Err(Error::Config(format!(
                "name must be non-empty and use only [A-Za-z0-9_-], got `{}`",
                self.name
            )));
        }
        self.data.validate()?;
        self.head.validate()?;
        self.train.base.validate()?;
        self.train.finetune.validate()?;
        self.eval.validate()?;
        // The head must have room for every class column after novel
        // expansion, plus the unknown prototypes.
        self.model
            .validate(self.data.synth.n_classes(), self.head.n_unknown)?;
        let stride = self.model.stride();
        if self.data.synth.image_size < stride {
            return Err(Error::Config(format!(
                "image_size {} is below the backbone stride {stride}",
                self.data.synth.image_size
            )));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the resolved document. Stable
    /// across processes: struct serialization order is fixed and maps are
    /// sorted.
    pub fn fingerprint(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        let mut out = String::with_capacity(16);
        for byte in &digest[..8] {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }

    /// TOML snapshot written next to every stage output.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn to_value<T: Serialize>(cfg: &T) -> Result<toml::Value> {
    toml::Value::try_from(cfg).map_err(|e| Error::Config(format!("config serialization: {e}")))
}

/// Overlay `over` onto `base`, table by table. Non-table values replace
/// wholesale, so lists are swapped, not concatenated.
fn merge(base: toml::Value, over: toml::Value) -> toml::Value {
    match (base, over) {
        (toml::Value::Table(mut b), toml::Value::Table(o)) => {
            for (k, v) in o {
                let merged = match b.remove(&k) {
                    Some(existing) => merge(existing, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            toml::Value::Table(b)
        }
        (_, over) => over,
    }
}

/// Apply one `a.b.c=raw` override. The raw text is parsed as a TOML
/// literal when possible (numbers, booleans, arrays, quoted strings) and
/// falls back to a plain string.
fn set_dotted(root: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let parsed = parse_literal(raw);
    let mut cursor = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let table = cursor.as_table_mut().ok_or_else(|| {
            Error::Config(format!("override `{key}` descends into a non-table value"))
        })?;
        cursor = table
            .entry((*part).to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = cursor.as_table_mut().ok_or_else(|| {
        Error::Config(format!("override `{key}` descends into a non-table value"))
    })?;
    table.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Value>(&doc) {
        Ok(toml::Value::Table(mut t)) => t.remove("v").expect("parsed assignment"),
        _ => toml::Value::String(raw.to_string()),
    }
}
