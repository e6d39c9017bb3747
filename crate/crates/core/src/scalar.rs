//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! All matrix algebra, autodiff, adapters and training code is written against
//! [`Scalar`], so the same engine runs in `f64` (the default used by the
//! acceptance tolerances) or `f32`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real floating-point scalar.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal or computed value into this scalar type.
    fn lit(value: f64) -> Self;

    /// Widens to `f64`. Exact for both `f32` and `f64`.
    fn as_f64(self) -> f64;

    /// Converts a count into this scalar type.
    fn from_count(n: usize) -> Self {
        Self::lit(n as f64)
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(value: f64) -> Self {
        value
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    #[inline]
    fn lit(value: f64) -> Self {
        value as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}
