use std::path::PathBuf;

/// Errors raised while reading or writing the on-disk model format.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("unsupported model format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("weight blob checksum mismatch: manifest says {expected:016x}, blob hashes to {actual:016x}")]
    ChecksumMismatch { expected: u64, actual: u64 },

    #[error("weight blob is truncated or oversized: manifest declares {declared} bytes, file has {actual}")]
    TruncatedBlob { declared: u64, actual: u64 },

    #[error("malformed manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch at {layer}: expected {expected}, got {actual}")]
    Shape {
        layer: String,
        expected: String,
        actual: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(
        layer: impl Into<String>,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::Shape {
            layer: layer.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
