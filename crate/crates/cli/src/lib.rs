//! Batch front end: experiment grids of the cAIC Monte Carlo harness and
//! single-dataset fits.

pub mod config;
pub mod data;
pub mod fit;
pub mod grid;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn io(e: impl std::fmt::Display) -> Self {
        CliError::Io(e.to_string())
    }

    /// Process exit code: 2 for bad input or configuration, 3 for numerical failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Numerical(_) => 3,
            _ => 2,
        }
    }
}

/// Worker count: explicit value, else the config, else available cores.
pub fn resolve_threads(explicit: Option<usize>, config: Option<usize>) -> usize {
    explicit
        .or(config)
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}
