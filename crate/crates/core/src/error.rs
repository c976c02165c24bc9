use std::path::{Path, PathBuf};

use bcg_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error("channel {channel} has zero variance")]
    ZeroVariance { channel: usize },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<CoreError>,
    },
}

impl CoreError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CoreError::Io { path: path.to_path_buf(), source }
    }

    pub fn json(path: &Path, source: serde_json::Error) -> Self {
        CoreError::Json { path: path.to_path_buf(), source }
    }

    /// Numeric failures map to a distinct process exit status.
    pub fn is_numeric(&self) -> bool {
        match self {
            CoreError::Numeric(_) => true,
            CoreError::Tensor(e) => matches!(e, TensorError::NonFinite { .. } | TensorError::NonFiniteGradient(_)),
            CoreError::Stage { source, .. } => source.is_numeric(),
            _ => false,
        }
    }

    pub fn is_config(&self) -> bool {
        match self {
            CoreError::Config(_) | CoreError::InvalidArgument(_) => true,
            CoreError::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
