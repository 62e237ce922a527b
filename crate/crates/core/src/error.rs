use thiserror::Error;

use crate::unet::Weights;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("internal consistency violated: {0}")]
    Consistency(String),

    #[error("invalid noise schedule or plan: {0}")]
    Schedule(String),

    #[error("no anomaly detected; test undefined")]
    EmptyRegion,

    #[error("truncation mass underflow (log mass {log_mass})")]
    MassUnderflow { log_mass: f64 },

    #[error("parametric search exceeded {steps} steps after covering [{start}, {reached}] of [{start}, {end}]")]
    StepBudget {
        steps: usize,
        start: f64,
        reached: f64,
        end: f64,
    },

    /// Training hit a non-finite loss. Carries the last weights with a finite loss.
    #[error("training diverged at step {step}")]
    Training { step: usize, checkpoint: Box<Weights> },

    #[error("covariance error: {0}")]
    Covariance(String),

    #[error("distribution family error: {0}")]
    Family(String),

    #[error("W1 target {target} unreachable; achievable range is [{lo}, {hi}]")]
    Calibration { target: f64, lo: f64, hi: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
