//! Strict JSON experiment configs and their digests.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use uobs_core::blowup::{ClassifierParams, FitMode, FitParams};
use uobs_core::pde::ProblemSpec;
use uobs_core::renorm::NoiseModel;
use uobs_core::verify::VerifyConfig;

use crate::Failure;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coeffs: Option<CoeffsConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub renorm: Option<RenormConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solve: Option<SolveConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blowup: Option<BlowupConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifyConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { schema_version: SCHEMA_VERSION, coeffs: None, renorm: None, solve: None, blowup: None, verify: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoeffsConfig {
    #[serde(default = "uobs_core::zp::default_delta_grid")]
    pub deltas: Vec<f64>,
    #[serde(default = "band_level")]
    pub level: usize,
}

fn band_level() -> usize {
    uobs_core::zp::DEFAULT_BAND_LEVEL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenormConfig {
    pub delta0: Vec<f64>,
    #[serde(default = "tau0")]
    pub tau0: Vec<f64>,
    #[serde(default = "noise")]
    pub noise: Vec<NoiseModel>,
    /// Defaults to `[seed]`.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub amplitude: f64,
    #[serde(default = "steps")]
    pub steps: usize,
    /// δ grid for the reported increment bounds.
    #[serde(default = "uobs_core::zp::default_delta_grid")]
    pub increment_grid: Vec<f64>,
}

fn tau0() -> Vec<f64> {
    vec![30.0]
}
fn noise() -> Vec<NoiseModel> {
    vec![NoiseModel::None]
}
fn one() -> f64 {
    1.0
}
fn steps() -> usize {
    5000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveConfig {
    pub problem: ProblemSpec,
    /// Radius of the ball on which manufactured boundary data is compared with the solution.
    #[serde(default = "error_radius")]
    pub error_radius: f64,
}

fn error_radius() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlowupConfig {
    /// Raw grid with a JSON sidecar.
    pub grid: String,
    /// Obstacle grid for the free boundary; zero when absent.
    #[serde(default)]
    pub psi: Option<String>,
    #[serde(default)]
    pub x0: [f64; 3],
    #[serde(default = "r0")]
    pub r0: f64,
    #[serde(default = "levels")]
    pub levels: usize,
    #[serde(default)]
    pub classifier: ClassifierParams,
    /// Free-boundary fit; the mode follows the classification when absent.
    #[serde(default)]
    pub fit_mode: Option<FitMode>,
    #[serde(default)]
    pub fit: FitParams,
}

fn r0() -> f64 {
    0.5
}
fn levels() -> usize {
    2
}

/// Parses `text`, reporting syntax and schema errors with line and column.
pub fn parse(text: &str) -> Result<ExperimentConfig, Failure> {
    let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| {
        Failure::config(format!("invalid config at line {} column {}: {e}", e.line(), e.column()))
    })?;
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(Failure::config(format!(
            "unsupported schema_version {} (expected {SCHEMA_VERSION})",
            cfg.schema_version
        )));
    }
    Ok(cfg)
}

pub fn load(path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
    parse(&text)
}

/// Hex SHA-256 of the compact JSON encoding.
pub fn digest<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}
