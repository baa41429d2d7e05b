//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape or dimension incompatibility.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid configuration (bad hyperparameters, malformed rules, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed binary or text artifact (checkpoint, vocabulary file, ...).
    #[error("format error: {0}")]
    Format(String),

    /// Dataset record does not match the expected task schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// Non-finite values or other numeric breakdown during training.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Collective communication failure or desync between workers.
    #[error("fabric error: {0}")]
    Fabric(String),

    /// Input validation failure at an operation boundary.
    #[error("validation error: {0}")]
    Validation(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Short machine-parseable category tag, used by the CLI for its
    /// single-line error output.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Format(_) => "format",
            Error::Schema(_) => "schema",
            Error::Numeric(_) => "numeric",
            Error::Fabric(_) => "fabric",
            Error::Validation(_) => "validation",
        }
    }
}
