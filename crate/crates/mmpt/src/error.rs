//! One error type for the whole crate; variants map onto the CLI exit codes.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: unusable shape {shape:?} ({why})")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        why: String,
    },

    #[error("{0}: non-finite value")]
    NonFinite(String),

    #[error("softmax: row {0} is fully masked")]
    FullyMaskedRow(usize),

    #[error("numeric: {0}")]
    Numeric(String),

    #[error("config: {0}")]
    Config(String),

    #[error("frame ordering: {0}")]
    Ordering(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("format: {0}")]
    Format(String),

    #[error("invariant {name}: {detail}")]
    Invariant { name: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
