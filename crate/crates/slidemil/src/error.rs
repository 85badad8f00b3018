//! Error type shared across the pipeline.

use std::path::PathBuf;

/// Everything that can go wrong in the library, grouped by failure class.
///
/// [`Error::class`] returns a short machine-parseable tag used by the CLI
/// for its single-line error output.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode {path}: {reason}")]
    ImageDecode { path: PathBuf, reason: String },

    #[error("unsupported image format: {path} ({reason})")]
    UnsupportedFormat { path: PathBuf, reason: String },

    #[error("parse error at row {row}, column {column}: {reason}")]
    Parse {
        row: usize,
        column: String,
        reason: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("config hash mismatch in {file}: expected {expected}, found {found}")]
    ConfigHash {
        file: PathBuf,
        expected: String,
        found: String,
    },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("{0}")]
    Data(String),
}

impl Error {
    /// Stable one-word class tag for machine-readable CLI failures.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::ImageDecode { .. } => "image-decode",
            Error::UnsupportedFormat { .. } => "unsupported-format",
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::Dimension { .. } => "dimension",
            Error::Config(_) => "config",
            Error::ConfigHash { .. } => "config-hash",
            Error::Divergence(_) => "divergence",
            Error::Data(_) => "data",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
