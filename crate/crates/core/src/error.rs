use thiserror::Error;

/// Crate-wide error type. The variants map onto the CLI exit codes:
/// configuration/parameter problems, malformed data or files, and
/// numeric failures (divergence, non-convergence).
#[derive(Debug, Error)]
pub enum Error {
    /// Bad shapes, incompatible hyperparameters, invalid flag combinations.
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid values inside otherwise well-formed inputs.
    #[error("data error: {0}")]
    Data(String),

    /// Malformed files: bad magic, truncation, version mismatch.
    #[error("format error: {0}")]
    Format(String),

    /// Numeric failure: solver non-convergence, divergent training.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A contract the caller must uphold was violated.
    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code for the CLI: 2 usage, 3 data/format, 4 numeric/training.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Format(_) | Error::Io(_) | Error::Json(_) => 3,
            Error::Numeric(_) | Error::Invariant(_) => 4,
        }
    }
}
