//! Error type shared by every module in the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible with the requested operation.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An operation produced or was handed a NaN or infinity.
    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    /// A scalar argument is outside its valid domain.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// An internal contract was violated (missing gradient, unpaired
    /// evaluation sample, inconsistent bookkeeping).
    #[error("contract violation: {0}")]
    Contract(String),

    /// The tape or a tensor is not in the state the call requires.
    #[error("state error: {0}")]
    State(String),

    /// A dataset record violates a benchmark invariant.
    #[error("data error: {0}")]
    Data(String),

    /// A dataset line failed to parse.
    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    /// A checkpoint file is malformed or truncated.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A configuration document is malformed or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
