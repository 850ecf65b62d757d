//! Shared error type for the crate.

use thiserror::Error;

/// Errors raised across the crate.
///
/// Variants map to the contract families used throughout: configuration
/// validation, domain preconditions, shape agreement, sampling feasibility,
/// and I/O on the binary/CSV interfaces.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration field failed validation.
    #[error("config error: {0}")]
    Config(String),

    /// An operation was called outside its domain (precondition violation).
    #[error("domain error: {0}")]
    Domain(String),

    /// Matrix / tensor shape mismatch.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A constrained sampling request cannot be satisfied.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// Numerical failure (non-finite loss, division by zero mass, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed file content (checkpoints, episode containers, CSV tables).
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn infeasible(msg: impl Into<String>) -> Self {
        Error::Infeasible(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
