//! One error type for the whole binary, carrying the exit code split the
//! tool promises: 2 when a run never reached the numerics (I/O, config,
//! schema, incompatible inputs), 1 when the numerics themselves failed.

use bbfit::datastore::StoreError;
use bbfit::engine::EngineError;
use bbfit::eval::EvalError;
use bbfit::model::ModelError;
use bbfit::simgen::SimError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numeric(_) => 1,
            CliError::Config(_) | CliError::Io(_) => 2,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Store(s) => CliError::Io(s.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Store(s) => CliError::Io(s.to_string()),
            EngineError::Model(m) => CliError::Config(m.to_string()),
            EngineError::Term(t) => CliError::Config(t.to_string()),
            EngineError::NeedTwoBatches(_) | EngineError::BadOption(_) => {
                CliError::Config(e.to_string())
            }
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::LengthMismatch(..) => CliError::Config(e.to_string()),
            other => CliError::Numeric(other.to_string()),
        }
    }
}
