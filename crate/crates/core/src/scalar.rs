//! Scalar abstraction shared by every timing and bandwidth computation.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating-point type used for seconds, bytes and bytes/second.
///
/// Implemented for `f32` and `f64`; the crate root exposes `f64` aliases.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable as scalar")
    }

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable as scalar")
    }

    /// Total order for finite values; NaN compares equal to everything.
    fn cmp_total(&self, other: &Self) -> std::cmp::Ordering {
        self.partial_cmp(other).unwrap_or(std::cmp::Ordering::Equal)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// `max(0, x)`.
#[inline]
pub fn pos<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}
