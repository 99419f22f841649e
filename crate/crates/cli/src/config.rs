use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use riskadj_core::baselines::{elastic_net_grid, hglm_grid, PenaltyConfig, SolverConfig};
use riskadj_core::data::DEFAULT_SPLIT;
use riskadj_core::nn::NnArchitecture;
use riskadj_core::training::TrainingConfig;

use crate::error::CliError;

/// Bumped whenever a config struct gains, loses or renames a field.
pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Settings for `riskadj train`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub split: [f64; 3],
    pub split_seed: u64,
    pub arch: NnArchitecture,
    /// Architectures searched by `--grid`; the desk grid around `arch` if absent.
    pub nn_grid: Option<Vec<NnArchitecture>>,
    pub training: TrainingConfig,
    pub use_pretrained: bool,
    pub solver: SolverConfig,
    /// Penalty for a single linear fit.
    pub penalty: PenaltyConfig,
    pub hglm_grid: Vec<PenaltyConfig>,
    pub enet_grid: Vec<PenaltyConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            split: DEFAULT_SPLIT,
            split_seed: 0,
            arch: NnArchitecture::default(),
            nn_grid: None,
            training: TrainingConfig::default(),
            use_pretrained: true,
            solver: SolverConfig::default(),
            penalty: PenaltyConfig::default(),
            hglm_grid: hglm_grid(),
            enet_grid: elastic_net_grid(),
        }
    }
}

/// Settings for `riskadj grad-check`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub arch: NnArchitecture,
    pub seeds: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            arch: NnArchitecture { embedding_dim: 4, lq_layers: 1, lq_width: 5, lp_layers: 2, lp_width: 6, ..Default::default() },
            seeds: 20,
        }
    }
}

fn from_value<T: DeserializeOwned>(value: Value, origin: &str) -> Result<T> {
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("{origin}: {e}")).into())
}

/// Reads a JSON config file, or the default when `path` is `None`.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Parse(format!("config {}: {e}", path.display())))?;
    from_value(value, &path.display().to_string())
}

/// Applies `key.path=value` overrides. Values parse as JSON and fall back to
/// plain strings; every key must already exist in the config.
pub fn apply_overrides<T: Serialize + DeserializeOwned>(config: &T, sets: &[String]) -> Result<T> {
    let mut root = serde_json::to_value(config).expect("config serializes");
    for item in sets {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got '{item}'")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = match slot {
                Value::Object(map) => map
                    .get_mut(part)
                    .ok_or_else(|| CliError::Usage(format!("unknown config key '{key}'")))?,
                Value::Array(items) => part
                    .parse::<usize>()
                    .ok()
                    .and_then(|i| items.get_mut(i))
                    .ok_or_else(|| CliError::Usage(format!("bad index '{part}' in '{key}'")))?,
                _ => return Err(CliError::Usage(format!("'{key}' descends into a scalar")).into()),
            };
        }
        *slot = value;
    }
    from_value(root, "--set")
}
