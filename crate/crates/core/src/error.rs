use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A loss term or input evaluated to NaN or infinity.
    #[error("non-finite value in `{term}`{}", iteration.map(|i| format!(" at iteration {i}")).unwrap_or_default())]
    NonFinite { term: String, iteration: Option<u64> },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn non_finite(term: impl Into<String>) -> Self {
        Error::NonFinite {
            term: term.into(),
            iteration: None,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attaches the training iteration to a non-finite error.
    pub fn at_iteration(self, iteration: u64) -> Self {
        match self {
            Error::NonFinite { term, .. } => Error::NonFinite {
                term,
                iteration: Some(iteration),
            },
            other => other,
        }
    }
}
