use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PopError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PopError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
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

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PopError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PopError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the input data rather than by usage or numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            PopError::Data(_)
                | PopError::Io { .. }
                | PopError::Image { .. }
                | PopError::Json(_)
                | PopError::Checkpoint(_)
                | PopError::ShapeMismatch { .. }
                | PopError::Degenerate(_)
        )
    }
}

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(PopError::Validation(msg()))
    }
}
