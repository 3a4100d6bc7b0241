//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! All math is written against [`Scalar`], which is implemented for `f32`
//! and `f64`. The nonlinearities involved (exp, tanh, sqrt) rule out exact
//! rational arithmetic, so only IEEE floats qualify.

use std::iter::Sum;

use ndarray::NdFloat;
use num_traits::FromPrimitive;
use rand::distributions::uniform::SampleUniform;

pub trait Scalar:
    NdFloat + FromPrimitive + Sum + for<'a> Sum<&'a Self> + Default + SampleUniform
{
    /// Converts an `f64` literal into the scalar type.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable as scalar")
    }

    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("count representable as scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Mean of a slice; zero for an empty slice.
pub(crate) fn mean<T: Scalar>(xs: &[T]) -> T {
    if xs.is_empty() {
        return T::zero();
    }
    xs.iter().copied().sum::<T>() / T::from_usize_lossy(xs.len())
}
