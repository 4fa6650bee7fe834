//! Scalar abstraction for the numeric core.

use core::fmt::{Debug, Display};
use core::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating-point scalar the library is generic over (f32 or f64).
pub trait Scalar:
    Float + FloatConst + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
}

impl<T> Scalar for T where
    T: Float
        + FloatConst
        + FromPrimitive
        + ToPrimitive
        + Debug
        + Display
        + Default
        + Sum
        + Send
        + Sync
        + 'static
{
}

/// Convert an `f64` constant into the working scalar.
#[inline]
pub fn cast<T: Scalar>(x: f64) -> T {
    T::from(x).expect("f64 constant not representable in scalar type")
}

/// Lossy view of a scalar as `f64`, for diagnostics and logging.
#[inline]
pub fn as_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// Clamp into `[lo, hi]`.
#[inline]
pub fn clamp<T: Scalar>(x: T, lo: T, hi: T) -> T {
    if x < lo {
        lo
    } else if x > hi {
        hi
    } else {
        x
    }
}

/// Wrap an angle into `(-pi, pi]`.
#[inline]
pub fn wrap_angle<T: Scalar>(a: T) -> T {
    let two_pi = T::PI() + T::PI();
    let k = ((a - T::PI()) / two_pi).ceil();
    a - two_pi * k
}
