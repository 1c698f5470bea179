use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, ProadError>;

#[derive(Debug, Error)]
pub enum ProadError {
    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Tensor(#[from] proad_tensor::TensorError),
}

impl ProadError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ProadError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 0 success, 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            ProadError::Usage(_) | ProadError::Config(_) => 1,
            ProadError::Data(_) | ProadError::Io { .. } | ProadError::Image { .. } => 2,
            ProadError::Metric(_) | ProadError::Numeric(_) | ProadError::Tensor(_) => 3,
        }
    }
}
