use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical divergence in {stage}{}{}",
        .layer.map(|l| format!(" at layer {l}")).unwrap_or_default(),
        .epoch.map(|e| format!(" at epoch {e}")).unwrap_or_default())]
    Divergence {
        stage: String,
        layer: Option<usize>,
        epoch: Option<usize>,
    },
    #[error("{0}")]
    Undefined(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    /// Process exit code for the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 1,
            Error::Data(_) | Error::Io(_) => 2,
            Error::Divergence { .. } => 3,
            Error::Tensor(TensorError::DegenerateRow { .. }) => 3,
            Error::Tensor(_) | Error::Undefined(_) => 1,
        }
    }

    /// Attaches an epoch to a divergence raised deeper in the stack.
    pub fn at_epoch(self, e: usize) -> Self {
        match self {
            Error::Divergence { stage, layer, .. } => Error::Divergence {
                stage,
                layer,
                epoch: Some(e),
            },
            other => other,
        }
    }
}
