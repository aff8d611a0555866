use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("index {index} out of range 1..={len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("schedule left (0,1) at step {step}: cumulative alpha = {value:e}")]
    ScheduleDegenerate { step: usize, value: f64 },

    #[error("non-finite score at step {step} (|Y_k| = {norm:e})")]
    NonFiniteScore { step: usize, norm: f64 },

    #[error("grid covers only {coverage:.6} of the mass (threshold {threshold})")]
    Coverage { coverage: f64, threshold: f64 },

    #[error("input {path} changed: expected hash {expected}, found {found}")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code: 1 validation, 2 I/O, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParameter(_)
            | Error::DimensionMismatch { .. }
            | Error::IndexOutOfRange { .. }
            | Error::Coverage { .. }
            | Error::Validation(_) => 1,
            Error::HashMismatch { .. }
            | Error::Format(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => 2,
            Error::ScheduleDegenerate { .. } | Error::NonFiniteScore { .. } => 3,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
