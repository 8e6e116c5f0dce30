//! Report records serialized to `report.json`. Field order is fixed by the
//! struct definitions and no volatile data (wall time) is serialized, so a
//! rerun with the same config and seed produces byte-identical files.

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub core: String,
    pub cli: String,
}

impl Versions {
    pub fn current() -> Self {
        Versions {
            core: fredholm_mc::VERSION.to_string(),
            cli: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorConstants {
    pub rho: f64,
    pub rho_bar: f64,
    pub rho2: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationReport {
    pub scheme: String,
    pub counts: Vec<u64>,
    /// Per-replicate draw cost of the dependent-trial method.
    pub dtm_draw_cost: u64,
    /// Per-replicate draw cost of the recursive method.
    pub recursive_draw_cost: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSummary {
    pub kind: String,
    pub level: f64,
    pub target: String,
    pub half_width: f64,
    /// The quantile (or inverted tail value) behind the half width.
    pub quantile: f64,
    /// Tail constant used by the subgaussian band; None when infinite or
    /// not applicable.
    pub c3: Option<f64>,
    /// Extra margin added when the band targets the full solution.
    pub truncation_margin: f64,
    /// Whether the band contains the oracle target (when computable).
    pub covers_oracle: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub command: String,
    pub config: ExperimentConfig,
    pub constants: OperatorConstants,
    pub depth: usize,
    pub allocation: Option<AllocationReport>,
    /// Total variates consumed, straight from the draw counter.
    pub draws: u64,
    /// Sup-norm distance between the estimate and the reference solution.
    pub grid_max_error: Option<f64>,
    pub band: Option<BandSummary>,
    pub artifacts: Vec<String>,
    pub versions: Versions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub budget: u64,
    pub status: String,
    pub dtm_counts: Vec<u64>,
    pub dtm_draws: u64,
    pub dtm_draws_counter: u64,
    pub dtm_rmse: f64,
    pub rec_budget: u64,
    pub rec_counts: Vec<u64>,
    pub rec_draws: u64,
    pub rec_draws_counter: u64,
    pub rec_rmse: f64,
    pub rmse_ratio: f64,
    pub draw_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub schema_version: u32,
    pub command: String,
    pub config: ExperimentConfig,
    pub constants: OperatorConstants,
    pub depth: usize,
    pub rows: Vec<CompareRow>,
    pub artifacts: Vec<String>,
    pub versions: Versions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub schema_version: u32,
    pub command: String,
    pub config: ExperimentConfig,
    pub constants: OperatorConstants,
    pub depth: usize,
    pub trials: u64,
    pub covered: u64,
    pub coverage: f64,
    pub band_kind: String,
    pub level: f64,
    /// Tail constant used by subgaussian bands (None when infinite/absent).
    pub c3: Option<f64>,
    pub artifacts: Vec<String>,
    pub versions: Versions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub schema_version: u32,
    pub command: String,
    pub config: ExperimentConfig,
    pub constants: OperatorConstants,
    pub depth: usize,
    pub pilot_trials: u64,
    /// None encodes an infinite constant (deterministic problem).
    pub c3: Option<f64>,
    pub artifacts: Vec<String>,
    pub versions: Versions,
}

/// Serializes a report deterministically (pretty JSON, fixed field order).
pub fn to_json<T: Serialize>(report: &T) -> String {
    let mut text = serde_json::to_string_pretty(report).expect("reports always serialize");
    text.push('\n');
    text
}
