//! Crate-wide error type.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by any pesqlab operation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// File could not be read or written.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// The file is structurally broken (truncated, bad chunk sizes, ...).
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    /// The file parses but uses an unsupported layout (encoding, channels).
    #[error("unsupported format: {field} = {value}")]
    Format { field: String, value: String },

    /// A manifest or report violates its schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// Inputs are well-formed but inconsistent with each other.
    #[error("validation error: {0}")]
    Validation(String),

    /// A single argument is out of its documented domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A configuration value is unusable (e.g. unstable filter section).
    #[error("configuration error: {0}")]
    Config(String),

    /// Level estimation found (near-)zero power; the signal cannot be
    /// normalized for scoring.
    #[error("degenerate level: {0}")]
    DegenerateLevel(String),

    /// A non-finite value appeared mid-computation.
    #[error("numeric error in stage `{stage}`: {message}")]
    Numeric { stage: String, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(offset: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn format(field: impl Into<String>, value: impl ToString) -> Self {
        Error::Format {
            field: field.into(),
            value: value.to_string(),
        }
    }

    pub(crate) fn numeric(stage: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Numeric {
            stage: stage.into(),
            message: message.into(),
        }
    }
}
