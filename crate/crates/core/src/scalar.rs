//! Scalar abstraction so the tensor and loss machinery can run in either
//! `f32` (training) or `f64` (finite-difference gradient checking).

use std::fmt::{Debug, Display};

use num_traits::Float;

/// Floating-point element type for tensors and graphs.
///
/// Model parameters are stored in `f32`; all loss graphs can be replayed in
/// `f64` for gradient verification. Reductions always accumulate in `f64`
/// regardless of the element type (see [`Scalar::as_f64`]).
pub trait Scalar:
    Float + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}
