use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the lab.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("non-finite numeric input: {0}")]
    NonFinite(String),

    #[error("tape does not belong to this network: {0}")]
    InvalidTape(String),

    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error("training failed at step {step}: {detail}")]
    TrainingFailure { step: usize, detail: String },

    #[error("timestep {t} out of range 0..={max}")]
    Index { t: usize, max: usize },

    #[error("value {value} out of range: {what}")]
    Range { what: &'static str, value: f64 },

    #[error("singular schedule: {0}")]
    SingularSchedule(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {detail}")]
    Load { path: PathBuf, detail: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;

impl LabError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        LabError::InvalidConfig(msg.into())
    }
}
