use std::path::PathBuf;

/// Errors produced by the reconstruction toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("point is not visible (camera-space z = {z})")]
    NotVisible { z: f64 },

    #[error("non-finite {field} on gaussian {index}")]
    NonFinite { index: usize, field: &'static str },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the data handed in (bad files, bad shapes),
    /// as opposed to numerical breakdown during optimization.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Numerical(_) | Error::NonFinite { .. })
    }
}
