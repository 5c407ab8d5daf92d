use thiserror::Error;

/// Errors raised by the numeric core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoreError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("layer {index} does not compose: {reason}")]
    Compose { index: usize, reason: String },

    #[error("invalid argument to {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("row {row} is not a probability distribution: {reason}")]
    NotADistribution { row: usize, reason: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn shape_err<T>(
    op: &'static str,
    expected: impl std::fmt::Debug,
    got: impl std::fmt::Debug,
) -> Result<T> {
    Err(CoreError::Shape {
        op,
        expected: format!("{expected:?}"),
        got: format!("{got:?}"),
    })
}

pub(crate) fn invalid<T>(op: &'static str, reason: impl Into<String>) -> Result<T> {
    Err(CoreError::InvalidArgument {
        op,
        reason: reason.into(),
    })
}
