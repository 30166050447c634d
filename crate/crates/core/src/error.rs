use std::path::PathBuf;

use crate::networks::Networks;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate rotation: {0}")]
    DegenerateRotation(String),

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, got {actual} ({what})")]
    Shape {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("numeric overflow at particle {particle}: {what}")]
    NumericOverflow { particle: usize, what: String },

    #[error("training diverged at iteration {iteration} (loss is not finite)")]
    Diverged {
        iteration: usize,
        last_good: Box<Networks<f64>>,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("file format error in {path:?}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(what: &'static str, expected: usize, actual: usize) -> Self {
        Error::Shape {
            what,
            expected,
            actual,
        }
    }

    /// Process exit code for the CLI: 1 validation, 2 numeric failure, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_)
            | Error::Config(_)
            | Error::Shape { .. }
            | Error::Dataset(_)
            | Error::Format { .. }
            | Error::DegenerateConfiguration(_) => 1,
            Error::DegenerateRotation(_)
            | Error::NumericOverflow { .. }
            | Error::Diverged { .. } => 2,
            Error::Io { .. } => 3,
        }
    }
}
