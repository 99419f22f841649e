use std::path::Path;

use anyhow::{Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use riskadj_core::baselines::{predict_linear, LinearCheckpoint, LinearKind, LinearParams};
use riskadj_core::data::{standardize, stratified_split, Dataset, SplitAssignment, StandardizationStats};
use riskadj_core::evaluation::{extract_effects, HospitalEffectEstimates};
use riskadj_core::nn::{ModelKind, NnCheckpoint, NnParameters};
use riskadj_core::training::predict;

use crate::error::CliError;

pub const BUNDLE_FORMAT: &str = "riskadj-model/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelFlag {
    Nn,
    FullyNonlinear,
    Hglm,
    Enet,
    HospitalMean,
}

impl ModelFlag {
    pub fn network_kind(self) -> Option<ModelKind> {
        match self {
            ModelFlag::Nn => Some(ModelKind::Proposed),
            ModelFlag::FullyNonlinear => Some(ModelKind::FullyNonlinear),
            _ => None,
        }
    }

    pub fn linear_kind(self) -> Option<LinearKind> {
        match self {
            ModelFlag::Hglm => Some(LinearKind::Hglm),
            ModelFlag::Enet => Some(LinearKind::ElasticNet),
            ModelFlag::HospitalMean => Some(LinearKind::HospitalMean),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Weights {
    Network(NnCheckpoint),
    Linear(LinearCheckpoint),
}

/// Checkpoint file: weights plus everything needed to rebuild the inputs
/// they were fitted on from the raw dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelBundle {
    pub format: String,
    pub model: ModelFlag,
    pub feature_map_hash: String,
    pub dataset_hash: String,
    pub split: [f64; 3],
    pub split_seed: u64,
    pub standardization: StandardizationStats,
    pub weights: Weights,
}

pub enum Model {
    Network(NnParameters),
    Linear(LinearParams),
}

impl Model {
    pub fn predict(&self, dataset: &Dataset, indices: &[usize]) -> Result<Vec<f64>> {
        Ok(match self {
            Model::Network(p) => predict(p, dataset, indices)?,
            Model::Linear(p) => predict_linear(p, dataset, indices)?,
        })
    }

    pub fn effects(&self) -> Result<HospitalEffectEstimates> {
        Ok(match self {
            Model::Network(p) => extract_effects(p)?,
            Model::Linear(p) => extract_effects(p)?,
        })
    }
}

impl ModelBundle {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        let bundle: ModelBundle = serde_json::from_str(&text)
            .map_err(|e| CliError::Parse(format!("checkpoint {}: {e}", path.display())))?;
        if bundle.format != BUNDLE_FORMAT {
            return Err(CliError::Usage(format!("unsupported checkpoint format '{}'", bundle.format)).into());
        }
        Ok(bundle)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("bundle serializes") + "\n"
    }

    /// Standardized dataset and split the weights expect.
    pub fn prepare(&self, raw: &Dataset) -> Result<(Dataset, SplitAssignment)> {
        if self.feature_map_hash != raw.feature_map_hash() {
            return Err(CliError::Usage("checkpoint was fitted on a different feature map".into()).into());
        }
        let split = stratified_split(raw, self.split, self.split_seed)?;
        let (data, _) = standardize(raw, Some(&self.standardization))?;
        Ok((data, split))
    }

    pub fn model(&self, dataset: &Dataset) -> Result<Model> {
        Ok(match &self.weights {
            Weights::Network(c) => Model::Network(NnParameters::from_checkpoint(c)?),
            Weights::Linear(c) => Model::Linear(c.params_for(dataset)?.clone()),
        })
    }
}
