use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum FodError {
    /// Malformed input: wrong dimensions, non-unit directions, invalid parameters.
    #[error("invalid input: {0}")]
    Validation(String),

    /// A configuration cannot be realised (for example a ROI whose voxel counts
    /// cannot be matched or a cubature that is not exact enough).
    #[error("configuration error: {0}")]
    Config(String),

    /// Too many voxels failed to converge.
    #[error("solver failed: {0}")]
    Solver(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FodError {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        FodError::Validation(msg.into())
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        FodError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, FodError>;
