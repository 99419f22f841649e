//! End-to-end synthetic experiment: generate, preprocess, fit every model,
//! and score predictions and hospital effects against the planted truth.

use std::collections::BTreeMap;

use log::info;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    elastic_net_grid, fit_linear, hglm_grid, linear_grid_search, predict_linear, LinearFit, LinearGridRow, LinearKind,
    PenaltyConfig, SolverConfig,
};
use crate::data::{
    filter_hospitals, standardize, stratified_split, Dataset, HospitalRemap, SplitAssignment, SplitPart,
    StandardizationStats, DEFAULT_SPLIT,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    compare_effects, evaluate, extract_effects, roc_auc, EffectComparison, EvaluationReport, HospitalEffectEstimates,
};
use crate::nn::{ModelKind, NnArchitecture};
use crate::synthgen::{generate, true_logit_parts, GeneratorConfig, Nonlinearity, SyntheticGroundTruth};
use crate::training::{grid_search, predict, train, GridRow, TrainOutcome, TrainingConfig};
use crate::util::{json_hash, pearson};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    /// Hospitals with fewer admissions are dropped.
    pub min_admissions: usize,
    pub require_readmission: bool,
    pub split: [f64; 3],
    pub split_seed: u64,
    pub arch: NnArchitecture,
    /// When set, the proposed model's architecture is chosen from this grid.
    pub nn_grid: Option<Vec<NnArchitecture>>,
    pub training: TrainingConfig,
    /// Initialize embeddings from the generator's pretrained table.
    pub use_pretrained: bool,
    pub fully_nonlinear: bool,
    pub solver: SolverConfig,
    pub hglm_grid: Vec<PenaltyConfig>,
    pub enet_grid: Vec<PenaltyConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            generator: GeneratorConfig::default(),
            min_admissions: 100,
            require_readmission: true,
            split: DEFAULT_SPLIT,
            split_seed: 0,
            arch: NnArchitecture::default(),
            nn_grid: None,
            training: TrainingConfig::default(),
            use_pretrained: true,
            fully_nonlinear: true,
            solver: SolverConfig::default(),
            hglm_grid: hglm_grid(),
            enet_grid: elastic_net_grid(),
        }
    }
}

impl ExperimentConfig {
    /// Linear truth at desk scale.
    pub fn linear() -> Self {
        let mut c = Self::default();
        c.generator.nonlinearity = Nonlinearity::Linear;
        c
    }

    /// Non-linear truth at desk scale.
    pub fn nonlinear() -> Self {
        Self::default()
    }

    /// Hospital filter and batch size of the full-scale setting.
    pub fn full_scale() -> Self {
        ExperimentConfig { min_admissions: 500, training: TrainingConfig::full_scale(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.arch.validate()?;
        self.training.validate()?;
        if let Some(g) = &self.nn_grid {
            if g.is_empty() {
                return Err(Error::Config("nn_grid is empty".into()));
            }
            g.iter().try_for_each(|a| a.validate())?;
        }
        if self.hglm_grid.is_empty() || self.enet_grid.is_empty() {
            return Err(Error::Config("baseline grids must be nonempty".into()));
        }
        if self.use_pretrained && self.arch.embedding_dim != self.generator.embedding_dim {
            return Err(Error::Config(format!(
                "pretrained embeddings have dimension {}, architecture uses {}",
                self.generator.embedding_dim, self.arch.embedding_dim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub records: usize,
    pub hospitals: usize,
    pub dropped_hospitals: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub positive_rate: f64,
    pub split_warnings: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectRecovery {
    /// Pearson correlation between estimated and planted effects.
    pub rho: f64,
    /// Fraction of hospitals where estimate and truth share a sign.
    pub sign_agreement: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub val_roc_auc: f64,
    pub test: EvaluationReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recovery: Option<EffectRecovery>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub effects: Option<HospitalEffectEstimates>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub penalty: Option<PenaltyConfig>,
}

impl ModelReport {
    pub fn test_auc(&self) -> f64 {
        self.test.overall.roc_auc.unwrap_or(f64::NAN)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub data: DataSummary,
    /// Test ROC-AUC of the true logit.
    pub oracle_test_roc_auc: f64,
    /// Test ROC-AUC of the true logit without its hospital term.
    pub oracle_patient_only_test_roc_auc: f64,
    pub models: BTreeMap<String, ModelReport>,
    /// Proposed model against HGLM.
    pub nn_vs_hglm: EffectComparison,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub nn_grid: Vec<GridRow>,
    pub hglm_grid: Vec<LinearGridRow>,
    pub enet_grid: Vec<LinearGridRow>,
}

impl ExperimentReport {
    pub fn model(&self, name: &str) -> &ModelReport {
        &self.models[name]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable report")
    }
}

/// Everything produced by a run, including the fitted models.
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub dataset: Dataset,
    pub ground_truth: SyntheticGroundTruth,
    pub remap: HospitalRemap,
    pub split: SplitAssignment,
    pub stats: StandardizationStats,
    pub nn: TrainOutcome,
    pub fully_nonlinear: Option<TrainOutcome>,
    pub linear: BTreeMap<String, LinearFit>,
}

pub const PROPOSED: &str = "proposed";
pub const FULLY_NONLINEAR: &str = "fully_nonlinear";
pub const HOSPITAL_MEAN: &str = "hospital_mean";
pub const HGLM: &str = "hglm";
pub const ELASTIC_NET: &str = "elastic_net";
/// Elastic net with the HGLM penalty and no L1 term.
pub const ELASTIC_NET_NO_L1: &str = "elastic_net_l1_zero";

fn recovery(effects: &HospitalEffectEstimates, truth: &[f64]) -> EffectRecovery {
    let agree = effects.omega.iter().zip(truth).filter(|(a, b)| a.signum() == b.signum()).count();
    EffectRecovery { rho: pearson(&effects.omega, truth), sign_agreement: agree as f64 / truth.len() as f64 }
}

struct Scorer<'a> {
    dataset: &'a Dataset,
    val: Vec<usize>,
    test: Vec<usize>,
    truth: Vec<f64>,
}

impl Scorer<'_> {
    fn report(
        &self,
        val_pred: &[f64],
        test_pred: &[f64],
        effects: Option<HospitalEffectEstimates>,
    ) -> Result<ModelReport> {
        let val_y = self.dataset.outcomes(&self.val);
        Ok(ModelReport {
            val_roc_auc: roc_auc(val_pred, &val_y)?,
            test: evaluate(test_pred, self.dataset, &self.test, true)?,
            recovery: effects.as_ref().map(|e| recovery(e, &self.truth)),
            effects,
            best_epoch: None,
            penalty: None,
        })
    }

    fn nn(&self, out: &TrainOutcome) -> Result<ModelReport> {
        let v = predict(&out.params, self.dataset, &self.val)?;
        let t = predict(&out.params, self.dataset, &self.test)?;
        let effects = match out.params.kind {
            ModelKind::Proposed => Some(extract_effects(&out.params)?),
            ModelKind::FullyNonlinear => None,
        };
        let mut r = self.report(&v, &t, effects)?;
        r.best_epoch = Some(out.log.best_epoch);
        Ok(r)
    }

    fn linear(&self, fit: &LinearFit) -> Result<ModelReport> {
        let v = predict_linear(&fit.params, self.dataset, &self.val)?;
        let t = predict_linear(&fit.params, self.dataset, &self.test)?;
        let mut r = self.report(&v, &t, Some(extract_effects(&fit.params)?))?;
        r.penalty = Some(fit.penalty);
        Ok(r)
    }
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let (raw, gt) = generate(&config.generator)?;
    let (filtered, remap) = filter_hospitals(&raw, config.min_admissions, config.require_readmission)?;
    if filtered.hospitals == 0 {
        return Err(Error::InvalidInput("hospital filter removed every hospital".into()));
    }
    let split = stratified_split(&filtered, config.split, config.split_seed)?;
    let test = split.indices(SplitPart::Test);
    let test_y = filtered.outcomes(&test);
    let oracle = |with_hospital: bool| -> Result<f64> {
        let scores: Vec<f64> = test
            .iter()
            .map(|&i| {
                let r = &filtered.records[i];
                let codes: Vec<_> = r.codes().collect();
                let h = remap.new_to_old[r.hospital];
                let l = true_logit_parts(h, r.sociodem[0], r.sociodem[1], &codes, &gt);
                if with_hospital {
                    l
                } else {
                    l - gt.omega_star[h]
                }
            })
            .collect();
        roc_auc(&scores, &test_y)
    };
    let oracle_auc = oracle(true)?;
    let oracle_patient = oracle(false)?;

    let train_idx = split.indices(SplitPart::Train);
    let stats = StandardizationStats::fit(train_idx.iter().map(|&i| &filtered.records[i]), filtered.sociodem_dim);
    let (dataset, stats) = standardize(&filtered, Some(&stats))?;
    let truth = remap.select(&gt.omega_star);
    let pretrained = if config.use_pretrained { dataset.pretrained_embeddings.as_ref() } else { None };
    let scorer = Scorer { dataset: &dataset, val: split.indices(SplitPart::Validation), test, truth };

    let mut models = BTreeMap::new();
    info!("training proposed model");
    let (nn, nn_grid) = match &config.nn_grid {
        Some(grid) => {
            let g = grid_search(ModelKind::Proposed, &dataset, &split, grid, &config.training, pretrained)?;
            (g.best, g.rows)
        }
        None => (train(ModelKind::Proposed, &dataset, &split, &config.arch, &config.training, pretrained)?, Vec::new()),
    };
    models.insert(PROPOSED.to_string(), scorer.nn(&nn)?);
    let fully_nonlinear = if config.fully_nonlinear {
        info!("training fully non-linear variant");
        let out = train(ModelKind::FullyNonlinear, &dataset, &split, &nn.params.arch, &config.training, pretrained)?;
        models.insert(FULLY_NONLINEAR.to_string(), scorer.nn(&out)?);
        Some(out)
    } else {
        None
    };

    info!("fitting linear baselines");
    let mut linear = BTreeMap::new();
    let hm = linear_grid_search(LinearKind::HospitalMean, &dataset, &split, &config.hglm_grid, &config.solver)?;
    let hg = linear_grid_search(LinearKind::Hglm, &dataset, &split, &config.hglm_grid, &config.solver)?;
    let en = linear_grid_search(LinearKind::ElasticNet, &dataset, &split, &config.enet_grid, &config.solver)?;
    let en0 = fit_linear(
        LinearKind::ElasticNet,
        &dataset,
        &split,
        PenaltyConfig { lambda1: 0.0, ..hg.best.penalty },
        &config.solver,
        None,
    )?;
    for (name, fit) in [(HOSPITAL_MEAN, hm.best), (HGLM, hg.best.clone()), (ELASTIC_NET, en.best), (ELASTIC_NET_NO_L1, en0)] {
        models.insert(name.to_string(), scorer.linear(&fit)?);
        linear.insert(name.to_string(), fit);
    }

    let nn_effects = models[PROPOSED].effects.as_ref().expect("proposed model is interpretable");
    let hglm_effects = models[HGLM].effects.as_ref().expect("linear model is interpretable");
    let nn_vs_hglm = compare_effects(nn_effects, hglm_effects)?;
    let data = DataSummary {
        records: dataset.len(),
        hospitals: dataset.hospitals,
        dropped_hospitals: raw.hospitals - dataset.hospitals,
        train: split.indices(SplitPart::Train).len(),
        validation: scorer.val.len(),
        test: scorer.test.len(),
        positive_rate: dataset.records.iter().map(|r| r.outcome as f64).sum::<f64>() / dataset.len() as f64,
        split_warnings: split.warnings.len(),
    };
    let report = ExperimentReport {
        config_hash: json_hash(config),
        data,
        oracle_test_roc_auc: oracle_auc,
        oracle_patient_only_test_roc_auc: oracle_patient,
        models,
        nn_vs_hglm,
        nn_grid,
        hglm_grid: hg.rows,
        enet_grid: en.rows,
    };
    Ok(ExperimentOutcome {
        report,
        dataset,
        ground_truth: gt,
        remap,
        split,
        stats,
        nn,
        fully_nonlinear,
        linear,
    })
}
