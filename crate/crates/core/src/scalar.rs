//! Scalar abstraction shared by the numerical modules.
//!
//! Everything numerical is written against [`Real`], which is implemented for
//! `f32` and `f64`. Files on disk are always 64-bit little-endian, so the
//! pipeline layer works in `f64` and converts at the boundary.

use nalgebra as na;
use num_traits as nt;

/// Floating point type usable by the estimators.
pub trait Real:
    na::RealField + Copy + nt::FloatConst + nt::FromPrimitive + nt::ToPrimitive + Default
{
    /// Machine epsilon of the type.
    fn eps() -> Self;
}

impl Real for f32 {
    fn eps() -> Self {
        f32::EPSILON
    }
}

impl Real for f64 {
    fn eps() -> Self {
        f64::EPSILON
    }
}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    na::convert(x)
}

/// Converts a `T` into `f64`.
#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    nt::ToPrimitive::to_f64(&x).unwrap_or(f64::NAN)
}

/// Converts an index-like count into `T`.
#[inline]
pub fn from_usize<T: Real>(n: usize) -> T {
    na::convert(n as f64)
}

/// Absolute value without trait-method ambiguity.
#[inline]
pub fn abs<T: Real>(x: T) -> T {
    if x < T::zero() {
        -x
    } else {
        x
    }
}
