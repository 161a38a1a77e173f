use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid data in row {row}: {message}")]
    InvalidData { row: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: String, found: String },

    #[error("vertex {vertex} has degree {degree:e}, below the degree floor")]
    DegenerateDegree { vertex: usize, degree: f64 },

    #[error("optimization diverged at iteration {iteration}: {message}")]
    Divergence { iteration: usize, message: String },

    #[error("eigensolver failure: {0}")]
    Spectral(String),

    #[error("parse error at line {line}{}: {message}", column.map(|c| format!(", column {c}")).unwrap_or_default())]
    Parse {
        line: usize,
        column: Option<usize>,
        message: String,
    },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn dims(expected: impl ToString, found: impl ToString) -> Self {
        Error::Dimension {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error: 2 for configuration and input
    /// problems, 3 for runtime and numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Dimension { .. } | Error::InvalidData { .. } | Error::Parse { .. } => 2,
            Error::DegenerateDegree { .. } | Error::Divergence { .. } | Error::Spectral(_) | Error::Io { .. } => 3,
        }
    }
}
