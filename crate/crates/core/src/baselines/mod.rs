//! Interpretable linear baselines: hospital-mean, HGLM and elastic net, all
//! penalized logistic regressions on hospital, category and
//! socio-demographic terms.

mod solver;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{map_to_categories, AdmissionRecord, Dataset, SplitAssignment, SplitPart};
use crate::error::{Error, Result};
use crate::evaluation::{roc_auc, HospitalEffectModel};
use crate::training::class_weights;
use crate::util::{logit, sigmoid};

pub use solver::soft_threshold;
use solver::{Design, Problem};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinearKind {
    HospitalMean,
    Hglm,
    ElasticNet,
}

impl LinearKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LinearKind::HospitalMean => "hospital-mean",
            LinearKind::Hglm => "hglm",
            LinearKind::ElasticNet => "enet",
        }
    }
}

/// `sigmoid(bias + alpha[hospital] + beta . (categories, sociodem))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearParams {
    pub bias: f64,
    pub alpha: Vec<f64>,
    /// Category coefficients followed by socio-demographic coefficients.
    pub beta: Vec<f64>,
    pub n_categories: usize,
    pub sociodem_dim: usize,
}

impl LinearParams {
    pub fn zeros(hospitals: usize, n_categories: usize, sociodem_dim: usize) -> Self {
        LinearParams {
            bias: 0.0,
            alpha: vec![0.0; hospitals],
            beta: vec![0.0; n_categories + sociodem_dim],
            n_categories,
            sociodem_dim,
        }
    }

    fn to_theta(&self) -> Vec<f64> {
        let mut t = Vec::with_capacity(1 + self.alpha.len() + self.beta.len());
        t.push(self.bias);
        t.extend_from_slice(&self.alpha);
        t.extend_from_slice(&self.beta);
        t
    }

    fn from_theta(theta: &[f64], hospitals: usize, n_categories: usize, sociodem_dim: usize) -> Self {
        LinearParams {
            bias: theta[0],
            alpha: theta[1..1 + hospitals].to_vec(),
            beta: theta[1 + hospitals..].to_vec(),
            n_categories,
            sociodem_dim,
        }
    }

    pub fn category_beta(&self) -> &[f64] {
        &self.beta[..self.n_categories]
    }

    pub fn nonzero_beta(&self) -> usize {
        self.beta.iter().filter(|&&b| b != 0.0).count()
    }

    fn check(&self, dataset: &Dataset) -> Result<()> {
        if self.n_categories != dataset.n_categories
            || self.sociodem_dim != dataset.sociodem_dim
            || self.beta.len() != self.n_categories + self.sociodem_dim
            || self.alpha.len() != dataset.hospitals
        {
            return Err(Error::Shape(format!(
                "linear model has K={} C={} M={}, data has K={} C={} M={}",
                self.alpha.len(),
                self.n_categories,
                self.sociodem_dim,
                dataset.hospitals,
                dataset.n_categories,
                dataset.sociodem_dim
            )));
        }
        Ok(())
    }

    /// Logit for one record under `category_map`.
    pub fn logit(&self, record: &AdmissionRecord, category_map: &[u32]) -> Result<f64> {
        if record.sociodem.len() != self.sociodem_dim || self.beta.len() != self.n_categories + self.sociodem_dim {
            return Err(Error::Shape(format!(
                "record has {} features, model expects {}",
                record.sociodem.len(),
                self.sociodem_dim
            )));
        }
        let alpha = self.alpha.get(record.hospital).ok_or_else(|| {
            Error::InvalidInput(format!("hospital {} outside {}", record.hospital, self.alpha.len()))
        })?;
        let ind = map_to_categories(record, category_map, self.n_categories)?;
        let mut eta = self.bias + alpha;
        for &c in &ind.ones {
            eta += self.beta[c as usize];
        }
        for (b, z) in self.beta[self.n_categories..].iter().zip(&record.sociodem) {
            eta += b * z;
        }
        Ok(eta)
    }
}

impl HospitalEffectModel for LinearParams {
    fn hospital_terms(&self) -> Result<(f64, &[f64])> {
        Ok((self.bias, &self.alpha))
    }
}

/// Probability for one record.
pub fn predict_record(params: &LinearParams, record: &AdmissionRecord, category_map: &[u32]) -> Result<f64> {
    params.logit(record, category_map).map(sigmoid)
}

/// Probabilities for the given records.
pub fn predict_linear(params: &LinearParams, dataset: &Dataset, indices: &[usize]) -> Result<Vec<f64>> {
    params.check(dataset)?;
    indices
        .iter()
        .map(|&i| predict_record(params, &dataset.records[i], &dataset.category_map))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltyConfig {
    /// L1 on beta.
    pub lambda1: f64,
    /// L2 on alpha, and on beta when `penalize_beta` is set.
    pub lambda2: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig { lambda1: 0.0, lambda2: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub class_weighting: bool,
    pub penalize_beta: bool,
    pub max_iter: usize,
    /// Bound on the gradient mapping norm of the per-record mean objective.
    pub tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { class_weighting: true, penalize_beta: true, max_iter: 20_000, tol: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub iterations: usize,
    pub converged: bool,
    pub grad_map_norm: f64,
    /// Per-record mean penalized objective at the returned point.
    pub objective: f64,
    /// Objective after each accepted step.
    #[serde(skip)]
    pub trace: Vec<f64>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct LinearFit {
    pub kind: LinearKind,
    pub penalty: PenaltyConfig,
    pub params: LinearParams,
    pub report: FitReport,
}

fn validate_penalty(p: &PenaltyConfig) -> Result<()> {
    for (name, v) in [("lambda1", p.lambda1), ("lambda2", p.lambda2)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
        }
    }
    Ok(())
}

/// Fits one baseline on the training part. `init` warm-starts the solver.
pub fn fit_linear(
    kind: LinearKind,
    dataset: &Dataset,
    split: &SplitAssignment,
    penalty: PenaltyConfig,
    opts: &SolverConfig,
    init: Option<&LinearParams>,
) -> Result<LinearFit> {
    validate_penalty(&penalty)?;
    if split.labels.len() != dataset.len() {
        return Err(Error::Shape(format!("split has {} labels for {} records", split.labels.len(), dataset.len())));
    }
    let idx = split.indices(SplitPart::Train);
    if idx.is_empty() {
        return Err(Error::InvalidInput("training part is empty".into()));
    }
    let y = dataset.outcomes(&idx);
    let w = if opts.class_weighting {
        let w = class_weights(&y)?;
        (w.pos, w.neg)
    } else {
        (1.0, 1.0)
    };
    let design = Design::build(dataset, &idx, w)?;
    let lambda1 = if kind == LinearKind::ElasticNet { penalty.lambda1 } else { 0.0 };
    let problem = Problem {
        design: &design,
        lambda1,
        lambda2: penalty.lambda2,
        penalize_beta: opts.penalize_beta,
        fit_beta: kind != LinearKind::HospitalMean,
    };
    let start = match init {
        Some(p) => {
            p.check(dataset)?;
            p.to_theta()
        }
        None => {
            let pos: f64 = y.iter().map(|&v| v as f64).sum::<f64>() * w.0;
            let neg: f64 = (y.len() as f64 - y.iter().map(|&v| v as f64).sum::<f64>()) * w.1;
            let mut t = vec![0.0; design.dim()];
            t[0] = logit(pos / (pos + neg));
            t
        }
    };
    let sol = problem.solve(start, opts.max_iter, opts.tol);
    let mut warnings = Vec::new();
    let empty: Vec<usize> = design
        .records_per_hospital()
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == 0)
        .map(|(k, _)| k)
        .collect();
    let mut theta = sol.theta;
    if !empty.is_empty() {
        for &k in &empty {
            theta[1 + k] = 0.0;
        }
        warnings.push(format!("{} hospitals without training records get alpha = 0", empty.len()));
    }
    if !sol.converged {
        warnings.push(format!(
            "no convergence after {} iterations (gradient mapping norm {:.3e})",
            sol.iterations, sol.grad_map_norm
        ));
    }
    for w in &warnings {
        warn!("{}: {w}", kind.as_str());
    }
    let objective = problem.objective(&theta);
    Ok(LinearFit {
        kind,
        penalty: PenaltyConfig { lambda1, ..penalty },
        params: LinearParams::from_theta(&theta, dataset.hospitals, dataset.n_categories, dataset.sociodem_dim),
        report: FitReport {
            iterations: sol.iterations,
            converged: sol.converged,
            grad_map_norm: sol.grad_map_norm,
            objective,
            trace: sol.trace,
            warnings,
        },
    })
}

/// Hospital terms only; beta is held at zero.
pub fn fit_hospital_mean(dataset: &Dataset, split: &SplitAssignment, lambda2: f64, opts: &SolverConfig) -> Result<LinearFit> {
    fit_linear(LinearKind::HospitalMean, dataset, split, PenaltyConfig { lambda1: 0.0, lambda2 }, opts, None)
}

pub fn fit_hglm(dataset: &Dataset, split: &SplitAssignment, lambda2: f64, opts: &SolverConfig) -> Result<LinearFit> {
    fit_linear(LinearKind::Hglm, dataset, split, PenaltyConfig { lambda1: 0.0, lambda2 }, opts, None)
}

pub fn fit_elastic_net(
    dataset: &Dataset,
    split: &SplitAssignment,
    lambda1: f64,
    lambda2: f64,
    opts: &SolverConfig,
) -> Result<LinearFit> {
    fit_linear(LinearKind::ElasticNet, dataset, split, PenaltyConfig { lambda1, lambda2 }, opts, None)
}

/// Per-record mean penalized objective of `params` on the training part.
pub fn training_objective(
    kind: LinearKind,
    dataset: &Dataset,
    split: &SplitAssignment,
    params: &LinearParams,
    penalty: PenaltyConfig,
    opts: &SolverConfig,
) -> Result<f64> {
    params.check(dataset)?;
    let idx = split.indices(SplitPart::Train);
    let y = dataset.outcomes(&idx);
    let w = if opts.class_weighting {
        let w = class_weights(&y)?;
        (w.pos, w.neg)
    } else {
        (1.0, 1.0)
    };
    let design = Design::build(dataset, &idx, w)?;
    let problem = Problem {
        design: &design,
        lambda1: if kind == LinearKind::ElasticNet { penalty.lambda1 } else { 0.0 },
        lambda2: penalty.lambda2,
        penalize_beta: opts.penalize_beta,
        fit_beta: true,
    };
    Ok(problem.objective(&params.to_theta()))
}

const LAMBDA_GRID: [f64; 4] = [1e-3, 1e-4, 1e-5, 1e-6];

pub fn hglm_grid() -> Vec<PenaltyConfig> {
    LAMBDA_GRID.iter().map(|&lambda2| PenaltyConfig { lambda1: 0.0, lambda2 }).collect()
}

pub fn elastic_net_grid() -> Vec<PenaltyConfig> {
    let mut g = Vec::new();
    for &lambda1 in &LAMBDA_GRID {
        for &lambda2 in &LAMBDA_GRID {
            g.push(PenaltyConfig { lambda1, lambda2 });
        }
    }
    g
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearGridRow {
    pub index: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub val_roc_auc: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct LinearGridOutcome {
    pub rows: Vec<LinearGridRow>,
    pub best_index: usize,
    pub best: LinearFit,
}

impl LinearGridOutcome {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["index", "lambda1", "lambda2", "val_roc_auc", "iterations", "converged", "error"])
            .expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.index.to_string(),
                r.lambda1.to_string(),
                r.lambda2.to_string(),
                r.val_roc_auc.map(|v| v.to_string()).unwrap_or_default(),
                r.iterations.to_string(),
                r.converged.to_string(),
                r.error.clone().unwrap_or_default(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

/// Fits every penalty and keeps the highest validation ROC-AUC; ties go to
/// the earlier grid point. Each fit warm-starts from the previous one.
pub fn linear_grid_search(
    kind: LinearKind,
    dataset: &Dataset,
    split: &SplitAssignment,
    grid: &[PenaltyConfig],
    opts: &SolverConfig,
) -> Result<LinearGridOutcome> {
    if grid.is_empty() {
        return Err(Error::Config("grid is empty".into()));
    }
    let val_idx = split.indices(SplitPart::Validation);
    let val_y = dataset.outcomes(&val_idx);
    let mut rows = Vec::new();
    let mut best: Option<(usize, f64, LinearFit)> = None;
    let mut warm: Option<LinearParams> = None;
    for (index, &penalty) in grid.iter().enumerate() {
        let result = fit_linear(kind, dataset, split, penalty, opts, warm.as_ref()).and_then(|fit| {
            let p = predict_linear(&fit.params, dataset, &val_idx)?;
            Ok((roc_auc(&p, &val_y)?, fit))
        });
        match result {
            Ok((auc, fit)) => {
                rows.push(LinearGridRow {
                    index,
                    lambda1: fit.penalty.lambda1,
                    lambda2: penalty.lambda2,
                    val_roc_auc: Some(auc),
                    iterations: fit.report.iterations,
                    converged: fit.report.converged,
                    error: None,
                });
                warm = Some(fit.params.clone());
                if best.as_ref().is_none_or(|(_, b, _)| auc > *b) {
                    best = Some((index, auc, fit));
                }
            }
            Err(e) => rows.push(LinearGridRow {
                index,
                lambda1: penalty.lambda1,
                lambda2: penalty.lambda2,
                val_roc_auc: None,
                iterations: 0,
                converged: false,
                error: Some(e.to_string()),
            }),
        }
    }
    match best {
        Some((best_index, _, best)) => Ok(LinearGridOutcome { rows, best_index, best }),
        None => Err(Error::InvalidInput(format!(
            "every grid point failed: {}",
            rows[0].error.clone().unwrap_or_default()
        ))),
    }
}

pub const LINEAR_CHECKPOINT_FORMAT: &str = "riskadj-linear/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearCheckpoint {
    pub format: String,
    pub kind: LinearKind,
    pub penalty: PenaltyConfig,
    pub feature_map_hash: String,
    pub params: LinearParams,
}

impl LinearCheckpoint {
    pub fn new(fit: &LinearFit, dataset: &Dataset) -> Self {
        LinearCheckpoint {
            format: LINEAR_CHECKPOINT_FORMAT.into(),
            kind: fit.kind,
            penalty: fit.penalty,
            feature_map_hash: dataset.feature_map_hash(),
            params: fit.params.clone(),
        }
    }

    /// Parameters, after checking the format and the feature map of `dataset`.
    pub fn params_for(&self, dataset: &Dataset) -> Result<&LinearParams> {
        if self.format != LINEAR_CHECKPOINT_FORMAT {
            return Err(Error::InvalidInput(format!("unknown checkpoint format {:?}", self.format)));
        }
        if self.feature_map_hash != dataset.feature_map_hash() {
            return Err(Error::InvalidInput("checkpoint was fitted on a different feature map".into()));
        }
        self.params.check(dataset)?;
        Ok(&self.params)
    }
}

#[cfg(test)]
mod tests;
