//! Errors and their exit codes.

use qplan_core::catalog::CatalogError;
use qplan_core::datagen::DatagenError;
use qplan_core::linearize::{LinearizeError, VocabError};
use qplan_core::plan::PlanError;
use qplan_core::smatch::SmatchError;
use qplan_models::ModelError;
use qplan_nn::checkpoint::CheckpointError;
use thiserror::Error;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_CHECKPOINT: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config file or option values.
    #[error("usage: {0}")]
    Usage(String),
    /// Unreadable, malformed or insufficient input data.
    #[error("data: {0}")]
    Data(String),
    /// Missing, corrupt or incompatible checkpoint.
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Checkpoint(_) => EXIT_CHECKPOINT,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let msg = e.to_string();
        match e {
            ModelError::Checkpoint(_)
            | ModelError::MissingCheckpoint(_)
            | ModelError::SchemaMismatch(_)
            | ModelError::ShapeMismatch { .. }
            | ModelError::UnknownId { .. }
            | ModelError::Nn(_) => CliError::Checkpoint(msg),
            _ => CliError::Data(msg),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Checkpoint(e.to_string())
    }
}

impl From<DatagenError> for CliError {
    fn from(e: DatagenError) -> Self {
        match e {
            DatagenError::InvalidRange { .. } | DatagenError::InvalidCount(_) | DatagenError::InvalidSpec(_) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        })*
    };
}

data_error!(PlanError, CatalogError, LinearizeError, VocabError, SmatchError, serde_json::Error);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_errors_map_to_exit_codes() {
        assert_eq!(CliError::from(ModelError::MissingCheckpoint("x".into())).exit_code(), 3);
        assert_eq!(CliError::from(ModelError::Checkpoint(CheckpointError::BadMagic)).exit_code(), 3);
        assert_eq!(CliError::from(ModelError::EmptyDataset).exit_code(), 2);
        assert_eq!(CliError::from(DatagenError::InvalidCount("0".into())).exit_code(), 1);
        assert_eq!(CliError::from(DatagenError::Corpus { line: 1, msg: "x".into() }).exit_code(), 2);
    }
}
