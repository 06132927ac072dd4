use thiserror::Error;

/// Errors surfaced by every module in this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced in {0}")]
    NonFinite(String),

    #[error("attention row {row} is fully masked")]
    FullyMaskedRow { row: usize },

    #[error("mask {index} has no attendable patch after thresholding")]
    EmptyMask { index: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("training aborted: non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
