//! Crate-wide error type.

/// Errors produced by the library.
///
/// The CLI maps these onto exit codes: configuration/input/internal errors
/// are usage failures (1), `Verification` is a verification failure (2), and
/// `Io`/`Json` are I/O failures (3).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration (bad hyperparameter, malformed config file).
    #[error("configuration error: {0}")]
    Config(String),
    /// Invalid input to an operation (out-of-range token id, empty batch).
    #[error("input error: {0}")]
    Input(String),
    /// Violated internal contract (layout mismatch, unmaterialized row).
    #[error("internal error: {0}")]
    Internal(String),
    /// A verification check failed.
    #[error("verification failed: {0}")]
    Verification(String),
    /// Filesystem failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    /// Serialization failure on a metrics or checkpoint file.
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
