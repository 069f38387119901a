use saewb_core::adapters::AdapterError;
use saewb_core::checkpoint::CheckpointError;
use saewb_core::corpus::CorpusError;
use saewb_core::evaluation::EvalError;
use saewb_core::lm::LmError;
use saewb_core::sae::SaeError;
use saewb_core::training::TrainError;
use thiserror::Error;

use crate::config::ConfigError;

/// Exit code 1 for anything the operator can fix by changing inputs,
/// 2 for failures during a run.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

pub fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<LmError> for CliError {
    fn from(e: LmError) -> Self {
        match e {
            LmError::Checkpoint(c) => c.into(),
            LmError::InvalidConfig(_) | LmError::TokenOutOfRange { .. } => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<SaeError> for CliError {
    fn from(e: SaeError) -> Self {
        match e {
            SaeError::Checkpoint(c) => c.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<AdapterError> for CliError {
    fn from(e: AdapterError) -> Self {
        match e {
            AdapterError::Checkpoint(c) => c.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Lm(l) => l.into(),
            EvalError::Sae(s) => s.into(),
            EvalError::Adapter(a) => a.into(),
            EvalError::Corpus(c) => c.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Invalid(m) => CliError::Validation(m),
            TrainError::Corpus(c) => c.into(),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Sae(s) => s.into(),
            TrainError::Adapter(a) => a.into(),
            TrainError::Eval(v) => v.into(),
            TrainError::Lm(l) => l.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}
