use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("payload length mismatch: dims {dims:?} need {expected} bytes, file holds {actual}")]
    LengthMismatch {
        dims: [usize; 3],
        expected: usize,
        actual: usize,
    },

    #[error("invalid dimensions {dims:?}: {reason}")]
    InvalidDims { dims: Vec<usize>, reason: String },

    #[error("value {value} at index {index} outside [0, 1]")]
    OutOfRange { index: usize, value: f32 },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("non-finite loss at epoch {epoch}, slice {slice}")]
    NanLoss { epoch: usize, slice: usize },

    #[error("dense reconstruction of {requested} entries exceeds the limit of {limit}")]
    SizeGuard { requested: usize, limit: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("atlas fit failed: best SSIM {best_ssim:.4} after {epochs} epochs (need {required})")]
    FitFailure {
        best_ssim: f64,
        epochs: usize,
        required: f64,
    },

    #[error("test pose {index} coincides with a training pose")]
    PoseOverlap { index: usize },

    #[error("count mismatch: {images} images but {poses} poses")]
    CountMismatch { images: usize, poses: usize },

    #[error("timing profiles come from different devices ({a} vs {b})")]
    DeviceMismatch { a: String, b: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
