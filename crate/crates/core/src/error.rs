use std::path::PathBuf;

use phr_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("{path}:{line}: {detail}")]
    Manifest {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("non-finite loss {loss} in stage {stage}, epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        stage: String,
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error("model: {0}")]
    Model(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Coarse failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numeric => 4,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ErrorClass::Config => "config_error",
            ErrorClass::Data => "data_error",
            ErrorClass::Numeric => "numeric_error",
        }
    }
}

impl CoreError {
    pub fn class(&self) -> ErrorClass {
        match self {
            CoreError::Config(_) | CoreError::Json(_) | CoreError::Model(_) => ErrorClass::Config,
            CoreError::Data(_)
            | CoreError::Manifest { .. }
            | CoreError::Image(_)
            | CoreError::Io(_) => ErrorClass::Data,
            CoreError::Degenerate(_) | CoreError::NonFiniteLoss { .. } => ErrorClass::Numeric,
            CoreError::Tensor(e) => match e {
                TensorError::NonFinite { .. } => ErrorClass::Numeric,
                TensorError::Io(_) | TensorError::Format(_) => ErrorClass::Data,
                _ => ErrorClass::Config,
            },
        }
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
