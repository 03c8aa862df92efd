use thiserror::Error;

/// Errors raised by the modelling and planning layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ItapError {
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, ItapError>;

impl ItapError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        ItapError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        ItapError::InvalidArgument(msg.into())
    }
}
