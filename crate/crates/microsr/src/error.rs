//! Crate-wide error type.

use std::path::PathBuf;

/// Errors surfaced by any stage of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot read image {path}: {source}")]
    ImageRead {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("cannot write image {path}: {source}")]
    ImageWrite {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("unsupported raster format for {path}: {reason}")]
    UnsupportedRaster { path: PathBuf, reason: String },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("negative variance {0} is not a valid Gaussian parameter")]
    NegativeVariance(f64),
    #[error("invalid degradation parameter: {0}")]
    InvalidDegradation(String),
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error("invalid dataset request: {0}")]
    InvalidDataset(String),
    #[error("network shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid network configuration: {0}")]
    InvalidNetwork(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("loss input out of domain: {0}")]
    LossDomain(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("invalid training request: {0}")]
    InvalidTraining(String),
    #[error("invalid tiling: {0}")]
    InvalidTiling(String),
    #[error("invalid metric request: {0}")]
    InvalidMetric(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
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
}

pub type Result<T> = std::result::Result<T, Error>;
