//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real floating-point scalar: `f32` or `f64`.
///
/// Linear algebra comes from nalgebra's [`RealField`]; conversions to and from
/// `f64` literals go through num-traits.
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static {}

impl Real for f32 {}
impl Real for f64 {}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Real>(value: f64) -> T {
    T::from_f64(value).expect("f64 literal representable in scalar type")
}

/// Converts `T` into `f64` for reporting.
#[inline]
pub fn to_f64<T: Real>(value: T) -> f64 {
    value.to_f64().unwrap_or(f64::NAN)
}

#[inline]
pub(crate) fn is_finite<T: Real>(value: T) -> bool {
    to_f64(value).is_finite()
}

#[inline]
pub(crate) fn abs<T: Real>(value: T) -> T {
    RealField::max(value, -value)
}

#[inline]
pub(crate) fn max<T: Real>(a: T, b: T) -> T {
    RealField::max(a, b)
}

#[inline]
pub(crate) fn min<T: Real>(a: T, b: T) -> T {
    RealField::min(a, b)
}
