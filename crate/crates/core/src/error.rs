//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor axis did not have the size an operation required.
    #[error("{op}: {axis} mismatch (expected {expected}, got {actual})")]
    ShapeMismatch {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    /// An operation precondition (stride, kernel parity, ...) was violated.
    #[error("{op}: {what}")]
    Precondition { op: &'static str, what: String },

    /// `backward` was called on a value that is not a 1x1x1x1 scalar.
    #[error("backward: loss must be a scalar, got shape {shape}")]
    NonScalarLoss { shape: String },

    /// A pyramid level did not have the shape its level index dictates.
    #[error("pyramid level {level}: {what}")]
    PyramidShape { level: usize, what: String },

    /// Network configuration failed validation; lists every violated invariant.
    #[error("invalid config: {}", .violations.join("; "))]
    InvalidConfig { violations: Vec<String> },

    /// Training aborted because a loss or gradient went non-finite.
    #[error("non-finite loss at epoch {epoch}; first non-finite gradient: {param}")]
    NonFiniteLoss { epoch: usize, param: String },

    /// Checkpoint file is malformed or does not match the model.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Annotation / prediction document errors beyond raw JSON syntax.
    #[error("annotations: {0}")]
    Annotation(String),

    /// JSON syntax error (carries line/column from the parser).
    #[error("parse error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn precondition(op: &'static str, what: impl Into<String>) -> Self {
        Error::Precondition {
            op,
            what: what.into(),
        }
    }
}
