//! Scalar abstraction for the numeric pipeline.
//!
//! All feature-space math (backbone, heads, losses, metrics) is generic over
//! [`Scalar`] so the same code runs in f32 or f64. The default pipeline uses
//! [`crate::Real`] (f64); gradient checks rely on f64 precision.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Floating-point scalar usable throughout the numeric core.
pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + Sum<Self> + Debug + Display + Send + Sync + 'static
{
    /// Shorthand for embedding an f64 literal.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("literal out of range for scalar type")
    }

    /// Lossy widening to f64 for reporting and serialization.
    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn to_f64_lossy(self) -> f64 {
        self
    }
}
