//! Error type shared across the toolkit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A value or argument violates a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A file did not parse as the expected on-disk format.
    #[error("format error: {0}")]
    Format(String),

    /// Configuration file or flag combination is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    /// Process exit code for the CLI: validation and format problems exit
    /// with 2, runtime failures with 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) | Error::ShapeMismatch(_) | Error::Format(_) | Error::Config(_) => 2,
            Error::Diverged(_) | Error::Io(_) => 1,
        }
    }
}
