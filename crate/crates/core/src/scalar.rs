//! Scalar abstraction: every numeric kernel in this crate is generic over
//! `f32`/`f64` through this trait.

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, NumAssignOps};
use rand::distributions::uniform::SampleUniform;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar usable by all math kernels: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssignOps
    + ScalarOperand
    + SampleUniform
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn as_f64(self) -> f64;
    /// One draw from N(0, 1).
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
    /// One draw from U[lo, hi).
    fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: Self, hi: Self) -> Self {
        rng.gen_range(lo..hi)
    }
}

impl Scalar for f32 {
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

impl Scalar for f64 {
    fn as_f64(self) -> f64 {
        self
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

/// Conversion from an f64 literal or intermediate, for generic call sites.
#[inline]
pub fn s<S: Scalar>(v: f64) -> S {
    <S as FromPrimitive>::from_f64(v).expect("finite literal")
}
