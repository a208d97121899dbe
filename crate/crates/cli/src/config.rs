//! Optional TOML config file. Every key is optional; command-line flags
//! override file values, which override built-in defaults.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub tuning: TuningSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub database: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    pub d: Option<usize>,
    pub alpha: Option<f64>,
    pub num_clusters: Option<usize>,
    pub max_degree: Option<usize>,
    pub build_pool: Option<usize>,
    pub pool_size: Option<usize>,
    pub k_hub: Option<usize>,
    pub k: Option<usize>,
    pub repeats: Option<usize>,
    pub kmeans_iters: Option<usize>,
    pub seed: Option<u64>,
    pub order: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningSection {
    pub budget: Option<usize>,
    pub mode: Option<String>,
    pub recall_threshold: Option<f64>,
    pub d_min: Option<usize>,
    pub d_max: Option<usize>,
    pub alpha_min: Option<f64>,
    pub alpha_max: Option<f64>,
    pub clusters_min: Option<usize>,
    pub clusters_max: Option<usize>,
    pub gamma: Option<f64>,
    pub startup_trials: Option<usize>,
    pub candidates: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::argument(format!("config {}: {e}", path.display())))
    }
}

/// First of flag, file value, default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

pub fn require_path(flag: Option<PathBuf>, file: &Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    flag.or_else(|| file.clone())
        .ok_or_else(|| CliError::argument(format!("missing --{name} (flag or config file)")))
}
