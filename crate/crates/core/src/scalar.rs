//! Floating-point element type shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point element: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
