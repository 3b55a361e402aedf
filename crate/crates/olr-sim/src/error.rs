//! Error types shared across the simulator.

use thiserror::Error;

/// Errors produced by dataset construction, training, and I/O.
#[derive(Debug, Error)]
pub enum SimError {
    /// Invalid configuration value or combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// An argument referred to something outside its domain
    /// (e.g. an answer id not present in the prompt's answer space).
    #[error("domain error: {0}")]
    Domain(String),

    /// Stateful sequencing violated (e.g. non-monotonic trajectory epochs).
    #[error("state error: {0}")]
    State(String),

    /// A policy update produced a non-finite gradient or parameter.
    #[error("update error at prompt {prompt}: {msg}")]
    Update { prompt: u32, msg: String },

    /// Log-ratio requested for a label with zero rollout probability.
    #[error("undefined log-ratio for prompt {0}: label is not rollout-feasible")]
    UndefinedRatio(u32),

    /// A theory quantity's denominator vanished.
    #[error("undefined quantity: {0}")]
    Undefined(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl SimError {
    /// Process exit code category for the CLI. 0 is success.
    pub fn exit_code(&self) -> i32 {
        match self {
            SimError::Config(_) => 2,
            SimError::Domain(_) => 3,
            SimError::State(_) => 4,
            SimError::Update { .. } => 5,
            SimError::UndefinedRatio(_) | SimError::Undefined(_) => 6,
            SimError::Io(_) => 7,
            SimError::Json(_) => 8,
        }
    }
}

pub type SimResult<T> = Result<T, SimError>;
