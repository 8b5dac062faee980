//! Scalar abstraction so the whole stack can run in f32 (training) or f64
//! (gradient checks and other high-precision tests).

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating-point element type of tensors: f32 or f64.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    /// Draw one standard-normal value from `rng`.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Draw one uniform value in [-1, 1) from `rng`.
    fn uniform_sym<R: Rng + ?Sized>(rng: &mut R) -> Self;

    fn of_f64(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn uniform_sym<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.gen_range(-1.0f32..1.0f32)
    }

    fn of_f64(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn uniform_sym<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.gen_range(-1.0f64..1.0f64)
    }

    fn of_f64(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }
}
