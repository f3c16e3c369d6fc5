use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest {path} does not match the store schema: {message}")]
    ManifestSchema { path: PathBuf, message: String },

    #[error("duplicate image_id {image_id:?} in manifest")]
    DuplicateImageId { image_id: String },

    #[error("dimension mismatch in {path}: expected {expected}, found {found}")]
    DimensionMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("cannot decode npy file {path}: {message}")]
    Npy { path: PathBuf, message: String },

    #[error("unknown image_id {0:?}")]
    UnknownImage(String),

    #[error("invalid label {value} at (row {row}, col {col}); allowed [0, {num_classes}) or {ignore_index}")]
    InvalidLabel {
        row: usize,
        col: usize,
        value: u8,
        num_classes: usize,
        ignore_index: u8,
    },

    #[error("unsupported mask format in {path}: {message}")]
    MaskFormat { path: PathBuf, message: String },

    #[error("sample {0:?} has no label mask")]
    MissingLabels(String),

    #[error("noise calibration failed: target mIoU {target:.2}%, achieved {achieved:.2}%")]
    CalibrationFailure { target: f64, achieved: f64 },

    #[error("metric undefined: no pixels were evaluated")]
    UndefinedMetric,

    #[error("invalid checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures caused by bad inputs (as opposed to the environment).
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Io { .. })
    }
}
