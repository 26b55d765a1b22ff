//! Scalar abstraction for the numeric core.
//!
//! Everything that does arithmetic is generic over [`Scalar`], so the same
//! model code runs in f64 (tests, gradient checks, reproducibility claims)
//! and f32 (cheaper training runs).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point scalar usable by tensors, the tape, and the optimizer.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum<Self>
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from f64, for literals and data ingestion.
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to any Scalar")
    }

    /// Widening conversion used by metrics and serialization.
    fn into_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for converting an f64 constant into the active scalar type.
pub fn c<T: Scalar>(x: f64) -> T {
    T::from_f64_lossy(x)
}
