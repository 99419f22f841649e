//! Classification metrics and hospital effect extraction.

mod effects;
mod metrics;

pub use effects::{
    compare_effects, compare_omegas, extract_effects, histogram, histogram_csv, EffectComparison,
    HospitalEffectEstimates, HospitalEffectModel,
};
pub use metrics::{
    confusion, evaluate, metric_report, pr_auc, roc_auc, Confusion, EvaluationReport, MetricReport,
    DEFAULT_THRESHOLD,
};
