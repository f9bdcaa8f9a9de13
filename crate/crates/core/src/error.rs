use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected:?}, found {found} values")]
    Shape { expected: (usize, usize), found: usize },

    #[error("config {path}:{line}: {message}")]
    Config { path: String, line: usize, message: String },

    #[error("tile ({tile_x}, {tile_y}) overflowed with {count} gaussians (limit {limit})")]
    TileOverflow { tile_x: usize, tile_y: usize, count: usize, limit: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("corrupt data in {path}: {message}")]
    Corrupt { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn corrupt(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Corrupt { path: path.into(), message: msg.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
