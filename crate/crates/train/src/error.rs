use thiserror::Error;

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Core(#[from] upcycle_core::Error),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl TrainError {
    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        TrainError::Argument(msg.into())
    }
}

impl From<upcycle_core::TensorError> for TrainError {
    fn from(e: upcycle_core::TensorError) -> Self {
        TrainError::Core(e.into())
    }
}
