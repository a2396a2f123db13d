//! Scalar abstraction over the floating-point element type.
//!
//! All tensor math is generic over [`Scalar`] so the same code runs in
//! double precision for gradient verification and single precision for
//! training.

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type for tensors: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Short name used in diagnostics and checkpoint manifests.
    const NAME: &'static str;

    fn of_f64(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }

    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).expect("usize converts to any Scalar")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}
