//! Pipeline behind the `fodkit` command: simulation, fitting, metrics,
//! tracking and reproduction of the synthetic experiments, with every output
//! written as JSON documents or raw little-endian arrays with JSON sidecars.

pub mod config;
pub mod pipeline;

use fodkit::error::FodError;
use thiserror::Error;

/// Errors of the command line pipeline.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error("{failed} of {solves} voxel solves of {method} did not converge (limit {limit})")]
    NonConvergence {
        method: String,
        failed: usize,
        solves: usize,
        limit: f64,
    },

    #[error(transparent)]
    Core(#[from] FodError),
}

impl CliError {
    /// Process exit code: 2 for invalid input, 3 for solver failures, 1 for
    /// I/O problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::NonConvergence { .. } => 3,
            CliError::Core(e) => match e {
                FodError::Validation(_) | FodError::Config(_) | FodError::Format { .. } | FodError::Json(_) => 2,
                FodError::Solver(_) => 3,
                FodError::Io { .. } => 1,
            },
        }
    }
}
