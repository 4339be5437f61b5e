use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("parse error in {source_name} at {location}: {message}")]
    Parse {
        source_name: String,
        location: String,
        message: String,
    },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    /// Experiment configuration rejected before any work; `field` is the
    /// dotted path of the offending entry.
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("missing runs: {0}")]
    MissingRuns(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn config(field: impl ToString, message: impl ToString) -> Self {
        Error::Config {
            field: field.to_string(),
            message: message.to_string(),
        }
    }

    pub(crate) fn parse(
        source_name: impl ToString,
        location: impl ToString,
        message: impl ToString,
    ) -> Self {
        Error::Parse {
            source_name: source_name.to_string(),
            location: location.to_string(),
            message: message.to_string(),
        }
    }
}
