//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented bound. The message names the bound.
    #[error("domain error: {0}")]
    Domain(String),

    /// A placement or generation task could not be completed within its
    /// retry budget.
    #[error("capacity error: {context} (achieved {achieved} of {requested})")]
    Capacity {
        context: String,
        requested: usize,
        achieved: usize,
    },

    /// All posterior mass vanished, signalling a vacuous model.
    #[error("degenerate posterior: {0}")]
    Degenerate(String),

    /// Training produced a non-finite loss.
    #[error("training failure at epoch {epoch}, batch {batch}: {message}")]
    Training {
        epoch: usize,
        batch: usize,
        message: String,
    },

    /// Gradient verification failed for a specific parameter.
    #[error("gradient check failure at parameter {param_index}: {message}")]
    GradientCheck { param_index: usize, message: String },

    /// Chunk candidate footprints overlap, violating the separation
    /// assumption of the decomposed expected loss.
    #[error("overlapping candidate footprints between chunks: {0:?}")]
    OverlappingChunks(Vec<(usize, usize)>),

    /// Malformed file contents (headers, value ranges, truncation).
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    /// Invalid configuration key or value.
    #[error("config error: {0}")]
    Config(String),

    /// I/O failure with the offending path attached.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
