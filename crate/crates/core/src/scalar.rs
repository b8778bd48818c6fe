//! Scalar abstraction for the numeric core.
//!
//! Network evaluation, differentiation, PPO and the ABC loss are written once
//! against [`Scalar`] and instantiated for `f32` and `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point type usable as the parameter/activation type.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Short tag stored in checkpoints.
    const TAG: &'static str;

    /// Lossy conversion from `f64`; exact for `f64`.
    #[inline]
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {
    const TAG: &'static str = "f32";
}

impl Scalar for f64 {
    const TAG: &'static str = "f64";
}
