use std::path::PathBuf;

use thiserror::Error;

use crate::detector::DetectorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bounding box {0}")]
    InvalidBox(String),

    #[error("region of interest is empty (image has no annotations)")]
    EmptyRoi,

    #[error("no ground-truth annotations for this image")]
    NoAnnotations,

    #[error("{path}:{line}: {message}")]
    LabelParse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid synthetic scene: {0}")]
    Scene(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sample is empty")]
    EmptySample,

    #[error("image id `{0}` is not present in the test set")]
    UnknownImage(String),

    #[error(transparent)]
    Detector(#[from] DetectorError),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
