use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the model, samplers and pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("rank-deficient design: column {column} ({name}) is linearly dependent on earlier columns")]
    RankDeficient { column: usize, name: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("degenerate factor {0}: sum of squared factor scores is zero")]
    DegenerateFactor(usize),

    #[error("config error at line {line}, key `{key}`: {message}")]
    Config {
        key: String,
        line: usize,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error on {path}: {message}")]
    Csv { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

/// Failure class, mapped onto the CLI's exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Numerical,
    Io,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Dimension(_)
            | Error::Invalid(_)
            | Error::RankDeficient { .. }
            | Error::Config { .. } => ErrorClass::Validation,
            Error::Numerical(_) | Error::DegenerateFactor(_) => ErrorClass::Numerical,
            Error::Io { .. } | Error::Csv { .. } => ErrorClass::Io,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.class() {
            ErrorClass::Validation => 2,
            ErrorClass::Numerical => 3,
            ErrorClass::Io => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
