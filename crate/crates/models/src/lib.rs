//! Learned plan representations and the tasks built on them.
//!
//! - [`structure`]: the plan structure encoder `S(p)` with its pair-matching
//!   head, trained by plan-pair similarity regression.
//! - [`perf`]: per-operator-group three-column performance encoders `C(p)`.
//! - [`downstream`]: latency regression and template/cluster classification.
//! - [`metrics`]: error metrics, normalization and early stopping.

pub mod downstream;
pub mod metrics;
pub mod perf;
pub mod structure;

use qplan_core::linearize::LinearizeError;
use qplan_core::plan::FeatureError;
use qplan_nn::checkpoint::CheckpointError;
use qplan_nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("no rows for operator group {0}")]
    EmptyGroup(String),
    #[error("pair {index}: score {score} outside [0, 1]")]
    ScoreOutOfRange { index: usize, score: f64 },
    #[error("unknown id {id} at level {level} (vocabulary size {size})")]
    UnknownId { level: usize, id: u32, size: usize },
    #[error("unknown label {0}")]
    UnknownLabel(usize),
    #[error("{what}: expected {expected}, found {found}")]
    ShapeMismatch { what: String, expected: usize, found: usize },
    #[error("feature schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Linearize(#[from] LinearizeError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Checks that a fraction lies in `(0, 1]`.
pub(crate) fn check_fraction(fraction: f64) -> Result<(), ModelError> {
    if fraction > 0.0 && fraction <= 1.0 {
        Ok(())
    } else {
        Err(ModelError::InvalidConfig(format!("fraction {fraction} outside (0, 1]")))
    }
}
