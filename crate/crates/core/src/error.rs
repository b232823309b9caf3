use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("index {index} out of range for {what} of size {bound}")]
    OutOfRange { what: &'static str, index: usize, bound: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite training loss at step {step} (last good checkpoint: {last_good:?})")]
    NonFiniteLoss { step: u64, last_good: Option<PathBuf> },

    #[error("duality divergence {divergence:e} exceeds tolerance {tolerance:e} at step {step}")]
    DualityDivergence { step: usize, divergence: f64, tolerance: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape { op, detail: detail.into() })
}
