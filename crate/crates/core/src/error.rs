use thiserror::Error;

use crate::autodiff::GraphError;

/// Errors from the binary file formats (corpus, checkpoint, tensor tables).
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("{0} trailing bytes after end of data")]
    TrailingBytes(usize),
    #[error("corrupt file: {0}")]
    Corrupt(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("invalid sequence: {0}")]
    Sequence(String),
    #[error("token id {id} at position {position} is outside the vocabulary of size {vocab}")]
    OutOfVocab { id: u32, position: usize, vocab: usize },
    #[error("sequence of length {len} exceeds the maximum length {max}")]
    TooLong { len: usize, max: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("row {row} is not unit-normalized (norm {norm})")]
    NotNormalized { row: usize, norm: f64 },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
