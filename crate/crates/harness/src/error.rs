use gwa_core::controller::ControllerError;
use gwa_core::trace::TraceError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("failed to load dataset: {0}")]
    DatasetLoad(String),
    #[error("loss became non-finite in epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: u32, step: u32 },
    #[error("per-sample alignment data missing: {0}")]
    TraceMissing(String),
    #[error("epoch {0} has no per-sample scores")]
    EpochMissing(u32),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
