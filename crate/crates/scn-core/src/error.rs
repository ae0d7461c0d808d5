//! Error type shared across the workspace.

use thiserror::Error;

/// Unified error for tensor ops, simulation, datasets, training and probing.
///
/// The CLI maps variants to exit codes: `Numeric` → 3, `Io` → 1, everything
/// else (validation of shapes, arguments, configs, file formats) → 2.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape/extent mismatch between tensors or between a tensor and an op contract.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: String,
        got: String,
    },

    /// A value-level precondition violation (bad stride, out-of-range index, ...).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Numeric failure: non-finite loss, singular system, undefined metric.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Malformed on-disk artifact (dataset file, checkpoint). `location` pins the
    /// failure: a byte offset, a line number, or a named section.
    #[error("format error in {path} ({location}): {msg}")]
    Format {
        path: String,
        location: String,
        msg: String,
    },

    /// Config file rejection, with the offending line and key.
    #[error("config error at line {line}, key `{key}`: {msg}")]
    Config {
        line: usize,
        key: String,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Dimension {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn format(path: impl Into<String>, location: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            location: location.into(),
            msg: msg.into(),
        }
    }
}
