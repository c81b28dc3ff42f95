//! Command-line driver: run configuration, checkpoints, metric logs and the
//! experiment pipeline shared by the `covae` binary and its tests.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod experiment;
pub mod metrics;

use std::path::PathBuf;

use covae_core::datakit::DataError;
use covae_core::evaluation::EvalError;
use covae_core::model::ModelError;
use covae_core::sampler::SamplerError;
use covae_core::train::TrainError;
use thiserror::Error;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use metrics::{MetricRow, MetricsLog};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 divergence, 4 IO or corrupt files,
    /// 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Train(TrainError::Diverged { .. }) => 3,
            CliError::Train(TrainError::InvalidConfig(_)) => 2,
            CliError::Model(ModelError::InvalidConfig(_)) => 2,
            CliError::Sampler(SamplerError::InvalidSchedule(_) | SamplerError::InvalidAlpha(_)) => 2,
            CliError::Data(DataError::UnknownKind(_)) => 2,
            CliError::Io { .. } | CliError::Checkpoint { .. } | CliError::Csv(_) => 4,
            CliError::Data(_) => 4,
            _ => 1,
        }
    }
}
