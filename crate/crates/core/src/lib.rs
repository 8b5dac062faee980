//! Probabilistic forecasting on spatio-temporal graphs with conditional
//! denoising diffusion.
//!
//! History and future signals of a fixed graph are treated as one tensor;
//! a denoising network (gated causal temporal convolutions, graph
//! convolutions over the normalized adjacency, and a temporal U-structure)
//! is trained to predict the injected noise, and forecasts are drawn by
//! running the learned reverse process conditioned on the masked history.
//!
//! Core math is generic over the scalar type: training runs in `f32`,
//! gradient checks and precision-sensitive tests in `f64`.

pub mod baselines;
pub mod cli;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod scalar;
pub mod schedule;
pub mod tensor;
pub mod trainer;
pub mod ugnet;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, Var};

/// Single-precision tensor, the training default.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor, used by gradient checks and oracles.
pub type Tensor64 = Tensor<f64>;
