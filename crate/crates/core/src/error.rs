use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("byte {offset}: label out of range: {value} (classes 0..={max}, ignore 255)")]
    LabelOutOfRange { offset: u64, value: u8, max: u8 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("stage `{stage}`: {path}: {source}")]
    Stage {
        stage: &'static str,
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            message: message.into(),
        }
    }

    /// Attach a file path to errors produced by in-memory decoders.
    pub fn at(self, path: impl Into<PathBuf>) -> Self {
        let path = path.into();
        match self {
            Error::Truncated { expected, actual } => Error::Format {
                path,
                offset: actual,
                message: format!("truncated payload: expected {expected} bytes, found {actual}"),
            },
            Error::LabelOutOfRange { offset, value, max } => Error::Format {
                path,
                offset,
                message: format!("label out of range: {value} (classes 0..={max}, ignore 255)"),
            },
            Error::Format {
                offset, message, ..
            } => Error::Format {
                path,
                offset,
                message,
            },
            other => other,
        }
    }

    /// Tag an error with the pipeline stage and the file it concerns.
    pub fn in_stage(self, stage: &'static str, path: impl Into<PathBuf>) -> Self {
        match self {
            already @ Error::Stage { .. } => already,
            other => Error::Stage {
                stage,
                path: path.into(),
                source: Box::new(other),
            },
        }
    }

    /// Process exit code: 1 for bad inputs, 2 for internal failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Internal(_) => 2,
            Error::Stage { source, .. } => source.exit_code(),
            Error::Io { source, .. } if source.kind() != std::io::ErrorKind::NotFound
                && source.kind() != std::io::ErrorKind::PermissionDenied =>
            {
                2
            }
            _ => 1,
        }
    }
}
