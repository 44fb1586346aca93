//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! All of the estimator and policy math is written against [`Scalar`], so the
//! same code runs in `f64` (the default used by the experiment runner) and in
//! `f32` for quick low-precision checks.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point type usable throughout the crate.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + std::str::FromStr
    + 'static
{
    /// Tolerance used when validating that a row of probabilities sums to one.
    fn normalization_tol() -> Self {
        let eps = Self::epsilon().to_f64().unwrap_or(f64::EPSILON);
        cast(1e-12f64.max(256.0 * eps))
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an `f64` constant into `F`.
#[inline]
pub fn cast<F: Scalar>(v: f64) -> F {
    F::from_f64(v).expect("f64 constant representable in scalar type")
}

/// Converts a count into `F`.
#[inline]
pub fn from_usize<F: Scalar>(v: usize) -> F {
    F::from_usize(v).expect("count representable in scalar type")
}

#[inline]
pub fn to_f64<F: Scalar>(v: F) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

#[inline]
pub fn half<F: Scalar>() -> F {
    cast(0.5)
}

/// Logistic function `1 / (1 + e^{-t})`, evaluated without overflow.
pub fn sigmoid<F: Scalar>(t: F) -> F {
    if t >= F::zero() {
        F::one() / (F::one() + (-t).exp())
    } else {
        let e = t.exp();
        e / (F::one() + e)
    }
}

/// `log(1 + e^t)` computed as `max(t, 0) + log1p(e^{-|t|})`.
pub fn softplus<F: Scalar>(t: F) -> F {
    t.max(F::zero()) + (-t.abs()).exp().ln_1p()
}

/// `log Σ exp(v_i)` with max subtraction. Returns `-inf` for an empty slice.
pub fn log_sum_exp<F: Scalar>(values: &[F]) -> F {
    let max = values.iter().copied().fold(F::neg_infinity(), F::max);
    if !max.is_finite() {
        return max;
    }
    let sum: F = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Normalized log-probabilities from unnormalized logits.
pub fn log_softmax<F: Scalar>(logits: &[F]) -> Vec<F> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&l| l - lse).collect()
}

pub fn mean<F: Scalar>(values: &[F]) -> Option<F> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().copied().sum::<F>() / from_usize(values.len()))
    }
}
