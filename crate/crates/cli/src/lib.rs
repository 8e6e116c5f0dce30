//! Experiment harness for the Fredholm Monte Carlo solvers: declarative
//! configs, seeded pipelines, CSV/JSON reporting, and byte-exact replay.

use std::fmt;

pub mod config;
pub mod pipeline;
pub mod report;

/// Harness-level error carrying the process exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Configuration file or flag problem (exit 2).
    Config(String),
    /// Solver-level failure; contraction violations exit 3, budget gates
    /// exit 4, anything else exits 1.
    Core(fredholm_mc::Error),
    /// Filesystem trouble (exit 1).
    Io(std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(fredholm_mc::Error::ContractionViolated { .. }) => 3,
            CliError::Core(fredholm_mc::Error::BudgetGate { .. })
            | CliError::Core(fredholm_mc::Error::BudgetTooSmall { .. }) => 4,
            _ => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl From<fredholm_mc::Error> for CliError {
    fn from(e: fredholm_mc::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl std::error::Error for CliError {}
