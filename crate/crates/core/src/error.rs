//! Error type shared across the crate.
//!
//! Domain failures (malformed captures, bad manifests, config mistakes,
//! insufficient data) are reported through [`Error`]. Shape violations inside
//! the numeric core are programming errors and panic instead.

use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A raw signature violates the capture grammar (length, timestamps,
    /// stroke-state sequence).
    #[error("invalid signature: {0}")]
    InvalidSignature(String),

    /// A signature file failed to parse.
    #[error("{path}:{line}: {msg}")]
    SignatureParse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// Dataset manifest problems: missing files, duplicate ids, bad counts.
    #[error("manifest error: {0}")]
    Manifest(String),

    /// A referenced file does not exist.
    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    /// Run-configuration parse or validation failure.
    #[error("config error: {0}")]
    Config(String),

    /// Not enough samples to honor a sampling or template request.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Checkpoint serialization problems.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training diverged (non-finite loss or gradients).
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
