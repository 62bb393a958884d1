use evobox::config::ConfigError;
use evobox::data::DataError;
use evobox::eval::EvalError;
use evobox::model::{CheckpointError, ModelError};
use evobox::train::TrainError;
use thiserror::Error;

/// Every failure a command can report, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Io(String),
    #[error("training diverged: non-finite loss at iteration {0}")]
    NonFinite(u64),
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error("detections reference image {0:?}, which is not in the dataset")]
    UnknownId(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Data(_) | CliError::Checkpoint(_) | CliError::Io(_) => 2,
            CliError::NonFinite(_) => 3,
            CliError::Architecture(_) => 4,
            CliError::UnknownId(_) => 5,
            CliError::Other(_) => 1,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::ShapeMismatch { .. }
            | ModelError::MissingParameter(_)
            | ModelError::UnexpectedParameter(_)
            | ModelError::ImageShape { .. } => CliError::Architecture(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { iteration } => CliError::NonFinite(iteration),
            TrainError::Model(m) => m.into(),
            TrainError::Log(io) => CliError::Io(format!("writing loss log: {io}")),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::UnknownId(id) => CliError::UnknownId(id),
            EvalError::Data(d) => d.into(),
            EvalError::Model(m) => m.into(),
        }
    }
}
