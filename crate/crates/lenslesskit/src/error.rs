//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate PSF: all entries are zero")]
    DegeneratePsf,

    #[error("sparse PSF pad overflow: {nonzeros} entries above threshold exceed capacity {capacity}")]
    PadOverflow { nonzeros: usize, capacity: usize },

    #[error("sparse coordinate ({row}, {col}) outside grid {height}x{width}")]
    CoordOutOfRange {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },

    #[error("permutation of size {got} does not match section count {expected}")]
    PermutationSize { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("pretrained backbone weights unavailable at {path:?} and random initialization was not opted in (set allow_random_init)")]
    MissingBackbone { path: Option<PathBuf> },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error on {path}: {message}")]
    ImageDecode { path: PathBuf, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code per the CLI contract: 2 for config/usage problems,
    /// 3 for runtime or numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidArgument(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
