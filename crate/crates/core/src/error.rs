use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image format error: {0}")]
    Format(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("corrupted data: {0}")]
    Corruption(String),
    #[error("index {index} out of bounds for length {len}")]
    Bounds { index: usize, len: usize },
    #[error("image of {size}px too small for {scales} MS-SSIM scales")]
    Scale { size: usize, scales: usize },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
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
}
