//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or matrix dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A value violates a documented precondition (negative size, zero
    /// denominator, probability vector that does not sum to one, ...).
    #[error("invalid value: {0}")]
    Value(String),

    /// A forward pass or loss produced NaN or infinity.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A file did not match its expected format (IDX magic, mask grid, ...).
    #[error("format error: {0}")]
    Format(String),

    /// Run configuration failed validation.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
