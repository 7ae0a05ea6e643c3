use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: index {index} out of range for length {len}")]
    Index { op: &'static str, index: usize, len: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: malformed data at byte {offset}: {msg}")]
    Format { path: PathBuf, offset: u64, msg: String },

    #[error("{path}: {source}")]
    DataIo { path: PathBuf, source: std::io::Error },

    #[error("checkpoint rejected ({field}): {msg}")]
    Checkpoint { field: String, msg: String },

    #[error("training failed at parameter `{param}`: {msg}")]
    Training { param: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
