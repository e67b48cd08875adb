//! Scalar abstractions.
//!
//! The inference path ([`Scalar`]) is generic over `f32`/`f64`; reductions
//! always accumulate in `f64` and round once at the end. The flow oracle
//! ([`FlowScalar`]) additionally admits exact rationals so that path sums
//! computed in different association orders can be compared for equality.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Float, FromPrimitive, Num, Signed, ToPrimitive, Zero};

/// Floating-point element type for tensors and models: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Round an `f64` accumulator into this type.
    fn from_acc(v: f64) -> Self;

    /// Widen into the `f64` accumulator type. Exact for both impls.
    fn acc(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_acc(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn acc(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_acc(v: f64) -> Self {
        v
    }

    #[inline]
    fn acc(self) -> f64 {
        self
    }
}

/// Number type the flow oracle computes in.
pub trait FlowScalar: Clone + Num + Signed + PartialOrd + Debug + Send + Sync {
    /// Exact conversion from a finite `f64`.
    fn from_f64_exact(v: f64) -> Self;

    fn to_f64_lossy(&self) -> f64;
}

impl FlowScalar for f64 {
    fn from_f64_exact(v: f64) -> Self {
        v
    }

    fn to_f64_lossy(&self) -> f64 {
        *self
    }
}

impl FlowScalar for BigRational {
    fn from_f64_exact(v: f64) -> Self {
        BigRational::from_float(v).unwrap_or_else(|| BigRational::from_integer(BigInt::zero()))
    }

    fn to_f64_lossy(&self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}
