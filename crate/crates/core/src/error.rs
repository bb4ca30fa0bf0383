//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed annotation JSON is fatal; the byte offset locates the defect.
    #[error("malformed JSON in {path} at byte offset {offset} (line {line}, column {column}): {message}")]
    MalformedJson {
        path: PathBuf,
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("instance {instance} of image {image} has no mask and no segmenter is configured")]
    MissingMask { image: String, instance: usize },

    #[error("instance {instance} of image {image} has an empty mask")]
    EmptyMask { image: String, instance: usize },

    #[error("novel class {class} has {available} labeled instances, fewer than k={k}")]
    InsufficientShots {
        class: u32,
        available: usize,
        k: usize,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config fingerprint mismatch: artifact was produced with {artifact}, current config is {current} (pass --force to override)")]
    FingerprintMismatch { artifact: String, current: String },

    #[error("missing prerequisite artifact: run `{command}` first ({detail})")]
    MissingDependency { command: String, detail: String },

    #[error("non-finite loss at step {step}; state dumped to {dump}")]
    NonFiniteLoss { step: u64, dump: PathBuf },

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code classification used by the CLI: 2 for usage/dependency
    /// problems, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::MissingDependency { .. } => 2,
            _ => 1,
        }
    }
}
