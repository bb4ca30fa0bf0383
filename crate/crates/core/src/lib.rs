//! Few-shot object detection with a decoupled feature space.
//!
//! Feature magnitude carries objectness and feature angle carries class
//! identity; a synthesized pure-background copy of the base set supervises
//! magnitudes without foreground bias, unknown prototypes absorb unlabeled
//! foreground during base training, and per-task spatial attention splits
//! class-specific from class-agnostic information before the heads.
//!
//! Numeric kernels are generic over the scalar type via [`Scalar`]; the
//! pipeline instantiates them at [`Real`].

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod heads;
pub mod model;
pub mod nn;
pub mod pbbs;
pub mod pipeline;
pub mod plot;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar type used by the training/evaluation pipeline.
pub type Real = f64;
