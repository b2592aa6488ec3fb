use std::path::PathBuf;

/// Errors produced anywhere in the segmentation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("mixed shapes: {0}")]
    MixedShapes(String),
    #[error("bad shape: {0}")]
    BadShape(String),
    #[error("value {value} outside [-1, 1] at index {index}")]
    OutOfRange { index: usize, value: f64 },
    #[error("mask is not binary: value {value} at index {index}")]
    NonBinary { index: usize, value: f64 },
    #[error("split of {train}+{val} samples exceeds dataset size {available}")]
    SplitTooLarge {
        train: usize,
        val: usize,
        available: usize,
    },
    #[error("synthetic dataset must contain at least one sample")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite {which} loss at step {step}: {value}")]
    NonFiniteLoss {
        which: &'static str,
        step: u64,
        value: f64,
    },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("manifest {path}:{line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
