use molscale_core::model::ModelError;
use molscale_core::molgraph::MolError;
use molscale_core::sampler::SamplerError;
use molscale_core::scaling::ScalingError;
use molscale_core::trainer::TrainError;
use std::process::ExitCode;
use thiserror::Error;

/// Failure classes, each with its own exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Input(_) => 2,
            CliError::InsufficientData(_) => 3,
            CliError::Numerical(_) => 4,
        })
    }
}

impl From<MolError> for CliError {
    fn from(e: MolError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<SamplerError> for CliError {
    fn from(e: SamplerError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Diff(_) => CliError::Numerical(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NanGradient(_) => CliError::Numerical(e.to_string()),
            TrainError::EmptyDataset => CliError::InsufficientData(e.to_string()),
            TrainError::Model(m) => m.into(),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<ScalingError> for CliError {
    fn from(e: ScalingError) -> Self {
        match e {
            ScalingError::InsufficientData(_) => CliError::InsufficientData(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

pub fn io_error(path: &std::path::Path, e: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}
