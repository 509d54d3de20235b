//! Crate-wide error type and exit-code categories.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// How an error maps onto the process exit code of the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Bad invocation: unknown flags, inconsistent configuration, missing
    /// required options. Exit code 1.
    Config,
    /// Bad or inconsistent input data: dimension mismatches, truncated
    /// files, degenerate statistics. Exit code 2.
    Data,
}

/// Unified error type for all modules.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid user-supplied configuration or arguments.
    #[error("config error: {0}")]
    Config(String),

    /// Two inputs that must describe the same geometry/ensemble disagree.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Input values violate a documented precondition.
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// A statistic is undefined for this input (e.g. zero base rate).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Malformed serialized artifacts (containers, CSV tables, JSON).
    #[error("format error: {0}")]
    Format(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Exit-code category for the CLI: config errors exit 1, data errors 2.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Config,
            _ => ErrorCategory::Data,
        }
    }

    /// Convenience constructor for [`Error::Config`].
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Convenience constructor for [`Error::DimensionMismatch`].
    pub fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    /// Convenience constructor for [`Error::InvalidData`].
    pub fn data(msg: impl Into<String>) -> Self {
        Error::InvalidData(msg.into())
    }

    /// Convenience constructor for [`Error::Format`].
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
