use log::warn;
use serde::{Deserialize, Serialize};

use super::trainer::{predict, train, TrainOutcome, TrainingConfig};
use crate::data::{Dataset, SplitAssignment, SplitPart};
use crate::error::{Error, Result};
use crate::evaluation::roc_auc;
use crate::nn::{EmbeddingTable, ModelKind, NnArchitecture};

/// Full hyperparameter grid: Lq in {0,1,2}, Lp in {0,1,2}, Lq width in
/// {512, 1024}, Lp width in {256, 512}, dropout in {0.25, 0.5}.
pub fn table_vii_grid(embedding_dim: usize) -> Vec<NnArchitecture> {
    let mut grid = Vec::new();
    for lq_layers in [0, 1, 2] {
        for lp_layers in [0, 1, 2] {
            for lq_width in [512, 1024] {
                for lp_width in [256, 512] {
                    for dropout in [0.25, 0.5] {
                        grid.push(NnArchitecture {
                            embedding_dim,
                            lq_layers,
                            lq_width,
                            lp_layers,
                            lp_width,
                            dropout,
                            ..Default::default()
                        });
                    }
                }
            }
        }
    }
    grid
}

/// Lq in {0,1} crossed with Lp in {1,2} around `base`.
pub fn desk_grid(base: &NnArchitecture) -> Vec<NnArchitecture> {
    let mut grid = Vec::new();
    for lq_layers in [0, 1] {
        for lp_layers in [1, 2] {
            grid.push(NnArchitecture { lq_layers, lp_layers, ..base.clone() });
        }
    }
    grid
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub index: usize,
    pub arch: NnArchitecture,
    pub n_params: usize,
    pub val_roc_auc: Option<f64>,
    pub val_loss: Option<f64>,
    pub best_epoch: Option<usize>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct GridOutcome {
    pub rows: Vec<GridRow>,
    pub best_index: usize,
    pub best: TrainOutcome,
}

impl GridOutcome {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "index", "lq_layers", "lq_width", "lp_layers", "lp_width", "dropout", "n_params", "val_roc_auc", "val_loss",
            "best_epoch", "error",
        ])
        .expect("in-memory write");
        let opt = |v: Option<String>| v.unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.index.to_string(),
                r.arch.lq_layers.to_string(),
                r.arch.lq_width.to_string(),
                r.arch.lp_layers.to_string(),
                r.arch.lp_width.to_string(),
                r.arch.dropout.to_string(),
                r.n_params.to_string(),
                opt(r.val_roc_auc.map(|v| v.to_string())),
                opt(r.val_loss.map(|v| v.to_string())),
                opt(r.best_epoch.map(|v| v.to_string())),
                opt(r.error.clone()),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

/// Trains one model per grid point and keeps the one with the highest
/// validation ROC-AUC. Ties go to fewer parameters, then the smaller
/// architecture key, then grid order. Failed cells are recorded.
pub fn grid_search(
    kind: ModelKind,
    dataset: &Dataset,
    split: &SplitAssignment,
    grid: &[NnArchitecture],
    config: &TrainingConfig,
    pretrained: Option<&EmbeddingTable>,
) -> Result<GridOutcome> {
    if grid.is_empty() {
        return Err(Error::Config("grid is empty".into()));
    }
    let val_idx = split.indices(SplitPart::Validation);
    let val_y = dataset.outcomes(&val_idx);
    let mut rows = Vec::with_capacity(grid.len());
    let mut best: Option<(usize, f64, TrainOutcome)> = None;
    for (index, arch) in grid.iter().enumerate() {
        let result = train(kind, dataset, split, arch, config, pretrained)
            .and_then(|o| predict(&o.params, dataset, &val_idx).and_then(|p| roc_auc(&p, &val_y)).map(|auc| (o, auc)));
        match result {
            Ok((outcome, auc)) => {
                let n_params = outcome.params.n_params();
                rows.push(GridRow {
                    index,
                    arch: arch.clone(),
                    n_params,
                    val_roc_auc: Some(auc),
                    val_loss: Some(outcome.log.best().val_loss),
                    best_epoch: Some(outcome.log.best_epoch),
                    error: None,
                });
                let better = match &best {
                    None => true,
                    Some((bi, bauc, bo)) => {
                        let key = |p: usize, a: &NnArchitecture| (p, a.sort_key());
                        auc > *bauc
                            || (auc == *bauc && key(n_params, arch) < key(bo.params.n_params(), &grid[*bi]))
                    }
                };
                if better {
                    best = Some((index, auc, outcome));
                }
            }
            Err(e) => {
                warn!("grid point {index} failed: {e}");
                rows.push(GridRow {
                    index,
                    arch: arch.clone(),
                    n_params: 0,
                    val_roc_auc: None,
                    val_loss: None,
                    best_epoch: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    match best {
        Some((best_index, _, best)) => Ok(GridOutcome { rows, best_index, best }),
        None => Err(Error::InvalidInput(format!(
            "every grid point failed: {}",
            rows[0].error.clone().unwrap_or_default()
        ))),
    }
}
