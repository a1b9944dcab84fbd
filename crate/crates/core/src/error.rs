use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::nn::NnError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("time {0} is outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("{context}: expected dimension {expected}, got {got}")]
    DimMismatch {
        context: String,
        expected: usize,
        got: usize,
    },
    #[error("needs at least {needed} conditions, got {got}")]
    TooFewConditions { needed: usize, got: usize },
    #[error("condition {cond} has no {domain} samples")]
    EmptyCondition { cond: usize, domain: &'static str },
    #[error("cost matrix must be square, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
