use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible with the requested operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A call violated an API precondition (e.g. backward on a non-scalar).
    #[error("contract error: {0}")]
    Contract(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    /// An invalid scene description (overlapping objects, out-of-grid cells).
    #[error("scene spec error: {0}")]
    Spec(String),

    #[error("format error at byte {position}: {message}")]
    Format { message: String, position: u64 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
