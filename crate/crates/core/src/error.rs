use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),

    #[error("non-finite value in {0}")]
    NonFiniteInput(&'static str),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("insufficient events: need {required}, stream has {available}")]
    InsufficientEvents { required: usize, available: usize },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("event record {index} out of bounds: ({x}, {y}) outside {width}x{height}")]
    EventBounds {
        index: u64,
        x: u32,
        y: u32,
        width: u32,
        height: u32,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint config mismatch: file has {found}, expected {expected}")]
    ConfigMismatch { expected: String, found: String },

    #[error("prototype bank has no seen classes")]
    EmptyBank,

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss at iteration {iter}")]
    NonFiniteLoss { iter: usize },

    #[error("reconstruction for sample {sample} unavailable at {path}: {source}")]
    MissingReconstruction {
        sample: String,
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
