use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("length error: {0}")]
    Length(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("load error: {0}")]
    Load(#[from] LoadError),

    #[error("worker failed on chunk {chunk}: {message}")]
    Worker { chunk: usize, message: String },

    #[error("bpe codes: line {line}: {message}")]
    Codes { line: usize, message: String },
}

/// Structured model-file load failures. Each names the offending entry.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum LoadError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated file while reading {0}")]
    Truncated(String),
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("duplicate tensor {0}")]
    DuplicateTensor(String),
    #[error("unexpected tensor {0}")]
    UnexpectedTensor(String),
    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor {0}: payload out of bounds or overlapping")]
    BadOffset(String),
    #[error("tensor {0}: unknown dtype tag {1}")]
    BadDtype(String, u8),
    #[error("tensor {0}: invalid alias")]
    BadAlias(String),
    #[error("invalid config block: {0}")]
    Config(String),
    #[error("invalid vocabulary block: {0}")]
    Vocab(String),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
