use thiserror::Error;

use cfx_core::ad::AdError;
use cfx_core::data::DataError;
use cfx_core::engine::{ConstraintError, EngineError};
use cfx_core::eval::EvalError;
use cfx_core::models::ModelError;

/// Failures grouped by the exit status they map to.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidArgument(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Ad(_) => CliError::Numerical(e.to_string()),
            ModelError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ConstraintError> for CliError {
    fn from(e: ConstraintError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<AdError> for CliError {
    fn from(e: AdError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(_) => CliError::Usage(e.to_string()),
            EngineError::Divergence { .. } | EngineError::Ad(_) => CliError::Numerical(e.to_string()),
            EngineError::Model(m) => m.into(),
            EngineError::Constraint(c) => c.into(),
            EngineError::Shape(_) | EngineError::NoInstances => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
