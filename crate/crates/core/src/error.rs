//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("antenna count {antennas} must exceed total UE count {ues}")]
    NotEnoughAntennas { antennas: usize, ues: usize },
    #[error("zero or non-finite rate for UE(s) {ues:?}: delays are undefined")]
    DegenerateRate { ues: Vec<usize> },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("program is malformed: {0}")]
    BadProgram(String),
    #[error("no strictly feasible starting point: {0}")]
    InfeasibleStart(String),
    #[error("inner solver failed at iteration {iteration}: {reason}")]
    SolverFailure { iteration: usize, reason: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
