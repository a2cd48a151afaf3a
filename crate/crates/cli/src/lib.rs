//! Batch entry points for fixture generation, training, evaluation and backtesting.

pub mod commands;
pub mod config;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {detail}")]
    Io { path: String, detail: String },
    #[error(transparent)]
    Data(#[from] marketgan::dataio::DataError),
    #[error(transparent)]
    Train(#[from] marketgan::train::TrainError),
    #[error(transparent)]
    Metrics(#[from] marketgan::metrics::MetricsError),
    #[error(transparent)]
    Portfolio(#[from] marketgan::portfolio::PortfolioError),
}

pub type Result<T> = std::result::Result<T, CliError>;

pub use commands::{run, Outcome, WORKERS_ENV};
pub use config::{Command, RunConfig};
