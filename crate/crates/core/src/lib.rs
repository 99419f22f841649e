//! Risk-adjusted hospital performance estimation.
//!
//! A neural risk model whose hospital identity enters only through an
//! additive logit term, next to the linear baselines used in practice, a
//! synthetic claims generator with planted hospital effects, and the
//! metrics needed to compare them.

pub mod baselines;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod nn;
pub mod synthgen;
pub mod training;
pub mod util;

pub use baselines::{LinearKind, LinearParams, PenaltyConfig, SolverConfig};
pub use data::{AdmissionRecord, Cohort, Dataset, DiagnosisCode, SplitAssignment, SplitPart};
pub use error::{Error, Result};
pub use evaluation::{EvaluationReport, HospitalEffectEstimates, MetricReport};
pub use nn::{ModelKind, NnArchitecture, NnParameters};
pub use synthgen::{GeneratorConfig, SyntheticGroundTruth};
pub use training::{TrainLog, TrainingConfig};
