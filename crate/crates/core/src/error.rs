use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("no monotonic surjective alignment: {frames} frames < {phonemes} phonemes")]
    InfeasibleAlignment { frames: usize, phonemes: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("ODE state diverged at step {step}")]
    Divergence { step: usize },

    #[error("training diverged at step {step} (last finite losses: {last_finite})")]
    TrainingDivergence { step: usize, last_finite: String },

    #[error("format version mismatch in {path}: expected {expected}, found {found}")]
    Version {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("checksum mismatch for {0}")]
    Checksum(PathBuf),

    #[error("corrupt store {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    SafeTensors(#[from] safetensors::SafeTensorError),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}
