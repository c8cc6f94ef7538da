//! Monte Carlo experiment harness: seeded sweeps over channel realizations,
//! deterministic CSV emission, an exhaustive grid oracle for tiny instances,
//! and summary statistics over the result files.

mod experiment;
mod oracle;
mod summary;

pub use experiment::{
    experiment_sca_options, run_experiment, trial_seed, write_csv, ExperimentSpec, ResultRow,
    RunScheme, Sweep, CSV_HEADER,
};
pub use oracle::{grid_oracle, OracleResult};
pub use summary::{summarize, GroupStats, ReductionStats, Summary};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Bad experiment specification or config file.
    #[error("config: {0}")]
    Config(String),
    /// Propagated model/optimizer error.
    #[error(transparent)]
    Core(#[from] fedmimo::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    /// Grid oracle could not produce a verdict.
    #[error("oracle: {0}")]
    Oracle(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;
