//! Error type shared across the crate.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by kernels, adapters, training, and persistence.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes do not match what an operation requires.
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    /// Invalid configuration value; the message names the offending field.
    InvalidConfig(String),
    /// Softmax over a row whose entries are all masked.
    EmptySupport,
    /// A kernel produced or received a non-finite value.
    NonFinite { op: &'static str },
    /// Classification target outside `[0, vocab)`.
    TargetOutOfRange { target: usize, vocab: usize },
    /// Batch request for a category the dataset does not contain.
    UnknownCategory { category: usize, n_categories: usize },
    /// Training aborted on a non-finite loss or gradient.
    Divergence { step: usize, what: &'static str },
    /// Container payload failed its checksum.
    ChecksumMismatch { expected: String, got: String },
    /// Container magic, version, or layout not understood.
    FormatError(String),
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, expected, got } => {
                write!(f, "{op}: shape mismatch, expected {expected:?}, got {got:?}")
            }
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::EmptySupport => write!(f, "softmax: empty support (all entries masked)"),
            Error::NonFinite { op } => write!(f, "{op}: non-finite value"),
            Error::TargetOutOfRange { target, vocab } => {
                write!(f, "target {target} out of range for vocab {vocab}")
            }
            Error::UnknownCategory { category, n_categories } => {
                write!(f, "unknown category {category} (dataset has {n_categories})")
            }
            Error::Divergence { step, what } => {
                write!(f, "training diverged at step {step}: non-finite {what}")
            }
            Error::ChecksumMismatch { expected, got } => {
                write!(f, "payload checksum mismatch: expected {expected}, got {got}")
            }
            Error::FormatError(msg) => write!(f, "container format error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
