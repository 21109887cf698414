use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("sequence length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },

    #[error("token id {id} outside vocabulary of size {vocab}")]
    Vocabulary { id: u32, vocab: usize },

    #[error("unknown word {0:?}")]
    UnknownWord(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("index {index} out of range [0, {bound})")]
    Index { index: usize, bound: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid token sequence: {0}")]
    Sequence(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("mask plan touches protected position {0}")]
    ProtectedPosition(usize),

    #[error("label error: {0}")]
    Label(String),

    #[error("malformed record {id:?}: {reason}")]
    MalformedRecord { id: String, reason: String },

    #[error("template error: {0}")]
    Template(String),

    #[error("incompatible inputs: {0}")]
    Compatibility(String),

    #[error("checkpoint integrity check failed for {path}: {reason}")]
    Integrity { path: PathBuf, reason: String },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
