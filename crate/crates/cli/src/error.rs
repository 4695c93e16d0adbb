use std::path::PathBuf;

use geopfn::baseline::BaselineError;
use geopfn::context::ContextError;
use geopfn::eval::EvalError;
use geopfn::geodata::GeoError;
use geopfn::model::{CheckpointError, ModelError};
use geopfn::prior::PriorError;
use geopfn::train::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("checkpoint {path}: {source}")]
    Checkpoint { path: PathBuf, source: CheckpointError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("task {task}: {source}")]
    Task { task: String, source: ModelError },
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 2 usage or config, 3 data, 4 capacity, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 2,
            CliError::Context(ContextError::Capacity { .. })
            | CliError::Task { source: ModelError::Capacity { .. }, .. }
            | CliError::Train(TrainError::Model(ModelError::Capacity { .. })) => 4,
            CliError::Train(TrainError::InvalidConfig(_) | TrainError::Prior(PriorError::InvalidConfig(_))) => 2,
            CliError::Train(TrainError::Model(ModelError::InvalidConfig(_))) => 2,
            CliError::Geo(GeoError::InvalidConfig(_)) | CliError::Baseline(BaselineError::InvalidSpec(_)) => 2,
            CliError::Context(ContextError::InvalidSpec(_)) => 2,
            CliError::Geo(_)
            | CliError::Context(_)
            | CliError::Baseline(_)
            | CliError::Checkpoint { .. }
            | CliError::Task { .. }
            | CliError::Prior(_) => 3,
            CliError::Io { .. } | CliError::Eval(_) | CliError::Train(_) | CliError::Json(_) => 1,
        }
    }
}
