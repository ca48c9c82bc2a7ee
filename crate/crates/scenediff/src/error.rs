//! Crate-wide error type and exit-code mapping.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A scene violates a structural invariant (missing ego, bad counts, ...).
    #[error("structural error: {0}")]
    Structural(String),

    /// Token or element counts exceed the configured capacity.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// Shape or argument mismatch between caller and callee.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad configuration value or unknown key.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input data (out-of-vocabulary token, bad file payload, ...).
    #[error("input error: {0}")]
    Input(String),

    /// A numeric op produced NaN or Inf.
    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },

    /// A scene degenerated below the minimum useful content.
    #[error("degenerate scene: {0}")]
    Degenerate(String),

    /// Required checkpoint or stage artifact is missing.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI. Each category gets a distinct code.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingArtifact(_) => 3,
            Error::Capacity(_) => 4,
            Error::Io { .. } => 5,
            Error::Input(_) | Error::Serde(_) => 6,
            Error::NonFinite { .. } | Error::Degenerate(_) => 7,
            Error::Structural(_) | Error::Contract(_) => 8,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
