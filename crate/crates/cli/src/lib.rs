//! Batch front end for emckt runs.

pub mod config;
pub mod post;
pub mod run;

pub use config::RunConfig;
pub use run::{run, CostReport, Mode, Report};

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Sim(#[from] emckt::Error),

    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("equivalence check failed: relative L2 {l2:.3e} exceeds {threshold:.3e}")]
    Equivalence { l2: f64, threshold: f64 },
}

impl CliError {
    /// 2 for bad input, 3 for solver failures, 4 for a failed comparison,
    /// 1 when results could not be written.
    pub fn exit_code(&self) -> i32 {
        use emckt::Error as E;
        match self {
            CliError::Config(_) | CliError::InvalidArgument(_) => 2,
            CliError::Sim(e) => match e {
                E::SolverFailure { .. } | E::Nonlinear { .. } | E::Assembly(_) => 3,
                _ => 2,
            },
            CliError::Output { .. } => 1,
            CliError::Equivalence { .. } => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            2 => "config",
            3 => "solver",
            4 => "equivalence",
            _ => "output",
        }
    }
}
