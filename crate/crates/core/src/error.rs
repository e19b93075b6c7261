use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MoodError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MoodError {
    /// Malformed or out-of-range argument to a pure operation.
    #[error("invalid input: {0}")]
    Input(String),

    /// Calibration could not be performed (empty or degenerate ID set).
    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("codec {0} is not supported in this build")]
    UnsupportedCodec(&'static str),

    #[error("encoding failed: {0}")]
    Encode(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{path}: {message}")]
    Schema { path: PathBuf, message: String },

    #[error("{path}: bad magic, expected {expected}")]
    BadMagic {
        path: PathBuf,
        expected: &'static str,
    },

    #[error("{path}: truncated payload while reading {what}")]
    Truncated { path: PathBuf, what: String },

    #[error("{path}: undecodable PNG: {message}")]
    PngDecode { path: PathBuf, message: String },

    #[error("sample pairing failed: {0}")]
    Pairing(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl MoodError {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Self::Input(msg.into())
    }

    pub(crate) fn calibration(msg: impl Into<String>) -> Self {
        Self::Calibration(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Self::Schema {
            path: path.into(),
            message: msg.into(),
        }
    }
}
