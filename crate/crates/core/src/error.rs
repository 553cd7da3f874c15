//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SptError {
    /// Incompatible tensor shapes, reported with both offenders.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Model / prompt / run configuration is inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset is empty, malformed, or missing a split.
    #[error("data error: {0}")]
    Data(String),

    /// Binary container violated its format; `offset` is the byte position
    /// of the first violation.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Non-finite value where a finite one is required (diverged loss,
    /// NaN gradient, bad probe point).
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SptError>;

impl SptError {
    pub fn config(msg: impl Into<String>) -> Self {
        SptError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        SptError::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        SptError::Numeric(msg.into())
    }
}
