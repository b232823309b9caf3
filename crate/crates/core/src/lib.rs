//! Transformer blocks with and without skip connections, value/projection
//! weights and normalisation layers, on a small reverse-mode autodiff core.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod attention;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod sigprop;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type Model64 = model::TransformerLM<f64>;
pub type Model32 = model::TransformerLM<f32>;

/// Thread count from `SIMPLEFORMER_THREADS`, defaulting to 1.
pub fn configured_threads() -> usize {
    std::env::var("SIMPLEFORMER_THREADS").ok().and_then(|v| v.trim().parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}
