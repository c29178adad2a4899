//! Training harness for the `mixprec` core: synthetic data, two small
//! models and a loss-scaled training loop that logs per-step metrics.

pub mod config;
pub mod data;
pub mod model;
pub mod train;

pub use config::{ModelKind, ModelSpec, Precision, RunConfig, ScalingConfig};
pub use data::SyntheticTask;
pub use model::{accuracy, build_model, forward, loss};
pub use train::{param_checksum, train, write_csv, StepRecord, TrainOutput};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Compute(#[from] mixprec::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl BenchError {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> u8 {
        match self {
            BenchError::Config(_) => 2,
            BenchError::Io(_) | BenchError::Csv(_) => 3,
            BenchError::Compute(_) => 1,
        }
    }
}
