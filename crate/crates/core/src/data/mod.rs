//! Admission-level data model and data-independent preprocessing.
//!
//! Hospitals are stored as dense integer indices; one-hot encodings only
//! exist inside the models that need them.

mod io;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::EmbeddingTable;
use crate::synthgen::SyntheticGroundTruth;
use crate::util::derive_rng;

pub use io::{meta_path, read_dataset, write_dataset, DatasetMeta};

/// Index into the diagnosis vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DiagnosisCode(pub u32);

impl DiagnosisCode {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Patient cohort, keyed by the primary diagnosis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Cohort {
    CR,
    CA,
    ME,
    NE,
    SG,
}

impl Cohort {
    pub const ALL: [Cohort; 5] = [Cohort::CR, Cohort::CA, Cohort::ME, Cohort::NE, Cohort::SG];

    pub fn as_str(self) -> &'static str {
        match self {
            Cohort::CR => "CR",
            Cohort::CA => "CA",
            Cohort::ME => "ME",
            Cohort::NE => "NE",
            Cohort::SG => "SG",
        }
    }

    pub fn from_index(i: usize) -> Cohort {
        Cohort::ALL[i % Cohort::ALL.len()]
    }
}

impl fmt::Display for Cohort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Cohort {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Cohort::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown cohort '{s}'"))
    }
}

/// One hospitalization.
#[derive(Clone, Debug, PartialEq)]
pub struct AdmissionRecord {
    pub admission_id: u64,
    pub hospital: usize,
    pub primary: DiagnosisCode,
    /// Unordered set of secondary diagnoses.
    pub secondaries: Vec<DiagnosisCode>,
    /// Socio-demographic features; the canonical layout is `[age, gender]`.
    pub sociodem: Vec<f64>,
    pub outcome: u8,
    pub cohort: Cohort,
}

impl AdmissionRecord {
    /// Primary followed by secondaries.
    pub fn codes(&self) -> impl Iterator<Item = DiagnosisCode> + '_ {
        std::iter::once(self.primary).chain(self.secondaries.iter().copied())
    }
}

/// A collection of admissions together with its feature-space description.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<AdmissionRecord>,
    /// Number of hospitals `K`.
    pub hospitals: usize,
    pub vocab_size: usize,
    /// Socio-demographic dimension `M`.
    pub sociodem_dim: usize,
    pub n_categories: usize,
    /// Many-to-one map from diagnosis code to category, total over the vocabulary.
    pub category_map: Vec<u32>,
    pub max_secondaries: usize,
    pub ground_truth: Option<SyntheticGroundTruth>,
    pub pretrained_embeddings: Option<EmbeddingTable>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn outcomes(&self, indices: &[usize]) -> Vec<u8> {
        indices.iter().map(|&i| self.records[i].outcome).collect()
    }

    /// Hash over the feature-space description (not the records).
    pub fn feature_map_hash(&self) -> String {
        #[derive(Serialize)]
        struct FeatureMap<'a> {
            hospitals: usize,
            vocab_size: usize,
            sociodem_dim: usize,
            n_categories: usize,
            category_map: &'a [u32],
        }
        crate::util::json_hash(&FeatureMap {
            hospitals: self.hospitals,
            vocab_size: self.vocab_size,
            sociodem_dim: self.sociodem_dim,
            n_categories: self.n_categories,
            category_map: &self.category_map,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum ViolationKind {
    HospitalOutOfRange,
    CodeOutOfRange,
    DuplicateDiagnosis,
    TooManySecondaries,
    InvalidOutcome,
    SociodemDimension,
    NonFiniteFeature,
    CategoryMapIncomplete,
    CategoryOutOfRange,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViolationKind::HospitalOutOfRange => "hospital index out of range",
            ViolationKind::CodeOutOfRange => "diagnosis code out of range",
            ViolationKind::DuplicateDiagnosis => "duplicate diagnosis",
            ViolationKind::TooManySecondaries => "too many secondary diagnoses",
            ViolationKind::InvalidOutcome => "outcome not in {0,1}",
            ViolationKind::SociodemDimension => "socio-demographic dimension mismatch",
            ViolationKind::NonFiniteFeature => "non-finite socio-demographic value",
            ViolationKind::CategoryMapIncomplete => "category map not total over vocabulary",
            ViolationKind::CategoryOutOfRange => "category index out of range",
        };
        f.write_str(s)
    }
}

/// An invariant violation. `record` is `None` for dataset-level problems.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub record: Option<usize>,
    pub admission_id: Option<u64>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.admission_id {
            Some(id) => write!(f, "admission {id}: {}", self.kind),
            None => write!(f, "dataset: {}", self.kind),
        }
    }
}

/// Checks every type invariant. Reports at most one violation per record.
pub fn validate(dataset: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    if dataset.category_map.len() != dataset.vocab_size {
        out.push(Violation {
            record: None,
            admission_id: None,
            kind: ViolationKind::CategoryMapIncomplete,
        });
    }
    if dataset
        .category_map
        .iter()
        .any(|&c| c as usize >= dataset.n_categories)
    {
        out.push(Violation {
            record: None,
            admission_id: None,
            kind: ViolationKind::CategoryOutOfRange,
        });
    }
    let mut seen = BTreeSet::new();
    for (i, r) in dataset.records.iter().enumerate() {
        let kind = record_violation(dataset, r, &mut seen);
        if let Some(kind) = kind {
            out.push(Violation {
                record: Some(i),
                admission_id: Some(r.admission_id),
                kind,
            });
        }
    }
    out
}

fn record_violation(
    dataset: &Dataset,
    r: &AdmissionRecord,
    seen: &mut BTreeSet<DiagnosisCode>,
) -> Option<ViolationKind> {
    if r.hospital >= dataset.hospitals {
        return Some(ViolationKind::HospitalOutOfRange);
    }
    if r.codes().any(|c| c.index() >= dataset.vocab_size) {
        return Some(ViolationKind::CodeOutOfRange);
    }
    seen.clear();
    if !r.codes().all(|c| seen.insert(c)) {
        return Some(ViolationKind::DuplicateDiagnosis);
    }
    if r.secondaries.len() > dataset.max_secondaries {
        return Some(ViolationKind::TooManySecondaries);
    }
    if r.outcome > 1 {
        return Some(ViolationKind::InvalidOutcome);
    }
    if r.sociodem.len() != dataset.sociodem_dim {
        return Some(ViolationKind::SociodemDimension);
    }
    if r.sociodem.iter().any(|v| !v.is_finite()) {
        return Some(ViolationKind::NonFiniteFeature);
    }
    None
}

/// Old-to-new hospital index mapping produced by [`filter_hospitals`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HospitalRemap {
    /// `old_to_new[k]` is the dense index of original hospital `k`, if retained.
    pub old_to_new: Vec<Option<usize>>,
    /// `new_to_old[k']` is the original index of retained hospital `k'`.
    pub new_to_old: Vec<usize>,
}

impl HospitalRemap {
    pub fn identity(k: usize) -> Self {
        HospitalRemap {
            old_to_new: (0..k).map(Some).collect(),
            new_to_old: (0..k).collect(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.old_to_new.len() == self.new_to_old.len()
            && self.new_to_old.iter().enumerate().all(|(i, &o)| i == o)
    }

    /// Reindexes a per-original-hospital vector to the retained hospitals.
    pub fn select<T: Clone>(&self, values: &[T]) -> Vec<T> {
        self.new_to_old.iter().map(|&o| values[o].clone()).collect()
    }
}

/// Removes hospitals with fewer than `min_admissions` records or, when
/// `require_readmission` is set, without any positive outcome. Retained
/// hospitals are reindexed densely in their original order.
pub fn filter_hospitals(
    dataset: &Dataset,
    min_admissions: usize,
    require_readmission: bool,
) -> Result<(Dataset, HospitalRemap)> {
    let mut counts = vec![0usize; dataset.hospitals];
    let mut positives = vec![0usize; dataset.hospitals];
    for r in &dataset.records {
        if r.hospital >= dataset.hospitals {
            return Err(Error::InvalidInput(format!(
                "admission {} has hospital {} >= {}",
                r.admission_id, r.hospital, dataset.hospitals
            )));
        }
        counts[r.hospital] += 1;
        positives[r.hospital] += r.outcome as usize;
    }
    let mut old_to_new = vec![None; dataset.hospitals];
    let mut new_to_old = Vec::new();
    for k in 0..dataset.hospitals {
        let keep = counts[k] >= min_admissions && (!require_readmission || positives[k] > 0);
        if keep {
            old_to_new[k] = Some(new_to_old.len());
            new_to_old.push(k);
        }
    }
    let records: Vec<AdmissionRecord> = dataset
        .records
        .iter()
        .filter_map(|r| {
            old_to_new[r.hospital].map(|h| AdmissionRecord {
                hospital: h,
                ..r.clone()
            })
        })
        .collect();
    if records.is_empty() {
        return Err(Error::InvalidInput(
            "hospital filter removed every admission".into(),
        ));
    }
    let filtered = Dataset {
        records,
        hospitals: new_to_old.len(),
        ..dataset.clone()
    };
    Ok((
        filtered,
        HospitalRemap {
            old_to_new,
            new_to_old,
        },
    ))
}

/// Per-feature location/scale used for standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    /// Population standard deviation, or 1 for zero-variance features.
    pub std: Vec<f64>,
    /// Features passed through unscaled because their variance was zero.
    #[serde(default)]
    pub degenerate: Vec<usize>,
}

impl StandardizationStats {
    /// Population mean/stddev over the given records.
    pub fn fit<'a>(records: impl IntoIterator<Item = &'a AdmissionRecord>, dim: usize) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let rows: Vec<&AdmissionRecord> = records.into_iter().collect();
        for r in &rows {
            for (s, v) in sum.iter_mut().zip(&r.sociodem) {
                *s += v;
            }
            n += 1;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n.max(1) as f64).collect();
        let mut ss = vec![0.0; dim];
        for r in &rows {
            for ((acc, v), m) in ss.iter_mut().zip(&r.sociodem).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let mut degenerate = Vec::new();
        let std = ss
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let sd = (s / n.max(1) as f64).sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    degenerate.push(j);
                    1.0
                }
            })
            .collect();
        StandardizationStats {
            mean,
            std,
            degenerate,
        }
    }

    fn apply(&self, values: &mut [f64]) {
        for (j, v) in values.iter_mut().enumerate() {
            if !self.degenerate.contains(&j) {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
    }

    /// Inverse of the standardization transform.
    pub fn invert(&self, values: &mut [f64]) {
        for (j, v) in values.iter_mut().enumerate() {
            if !self.degenerate.contains(&j) {
                *v = *v * self.std[j] + self.mean[j];
            }
        }
    }
}

/// Standardizes every socio-demographic feature. Without `stats`, the input
/// is treated as the training split and its own statistics are used.
pub fn standardize(
    dataset: &Dataset,
    stats: Option<&StandardizationStats>,
) -> Result<(Dataset, StandardizationStats)> {
    let stats = match stats {
        Some(s) => {
            if s.mean.len() != dataset.sociodem_dim || s.std.len() != dataset.sociodem_dim {
                return Err(Error::Shape(format!(
                    "standardization stats cover {} features, dataset has {}",
                    s.mean.len(),
                    dataset.sociodem_dim
                )));
            }
            s.clone()
        }
        None => StandardizationStats::fit(&dataset.records, dataset.sociodem_dim),
    };
    for &j in &stats.degenerate {
        warn!("socio-demographic feature {j} has zero variance; left unscaled");
    }
    let mut out = dataset.clone();
    for r in &mut out.records {
        stats.apply(&mut r.sociodem);
    }
    Ok((out, stats))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Validation,
    Test,
}

impl SplitPart {
    pub const ALL: [SplitPart; 3] = [SplitPart::Train, SplitPart::Validation, SplitPart::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitPart::Train => "train",
            SplitPart::Validation => "validation",
            SplitPart::Test => "test",
        }
    }
}

impl FromStr for SplitPart {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitPart::Train),
            "validation" | "val" => Ok(SplitPart::Validation),
            "test" => Ok(SplitPart::Test),
            _ => Err(format!("unknown split part '{s}'")),
        }
    }
}

/// Train/validation/test label for every record of a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub labels: Vec<SplitPart>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl SplitAssignment {
    pub fn indices(&self, part: SplitPart) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &p)| p == part)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Default split fractions (train, validation, test).
pub const DEFAULT_SPLIT: [f64; 3] = [0.75, 0.1875, 0.0625];

/// Integer counts for `n` items by largest-remainder rounding. Equal
/// remainders go to the earlier part.
pub fn largest_remainder(n: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &p in order.iter().take(n.saturating_sub(assigned)) {
        counts[p] += 1;
    }
    counts
}

/// Per-hospital stratified split. Each hospital's records are shuffled with a
/// generator seeded from `(seed, hospital)` and cut by largest-remainder counts.
pub fn stratified_split(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|f| *f < 0.0 || !f.is_finite()) {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let mut by_hospital: Vec<Vec<usize>> = vec![Vec::new(); dataset.hospitals];
    for (i, r) in dataset.records.iter().enumerate() {
        if r.hospital >= dataset.hospitals {
            return Err(Error::InvalidInput(format!(
                "admission {} has hospital {} >= {}",
                r.admission_id, r.hospital, dataset.hospitals
            )));
        }
        by_hospital[r.hospital].push(i);
    }
    let mut labels = vec![SplitPart::Train; dataset.len()];
    let mut warnings = Vec::new();
    for (k, members) in by_hospital.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 3 {
            let msg = format!(
                "hospital {k} has {} records; all assigned to train",
                members.len()
            );
            warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        let mut rng = derive_rng(seed, &[0x5711, k as u64]);
        members.shuffle(&mut rng);
        let counts = largest_remainder(members.len(), &fractions);
        let mut cursor = 0;
        for (part, count) in SplitPart::ALL.into_iter().zip(counts) {
            for &i in &members[cursor..cursor + count] {
                labels[i] = part;
            }
            cursor += count;
        }
    }
    Ok(SplitAssignment { labels, warnings })
}

/// Sparse binary indicator over categories.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategoryIndicator {
    pub len: usize,
    /// Sorted, distinct category indices set to one.
    pub ones: Vec<u32>,
}

impl CategoryIndicator {
    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.len];
        for &c in &self.ones {
            v[c as usize] = 1.0;
        }
        v
    }
}

/// Category indicator of every diagnosis (primary and secondary) on the record.
pub fn map_to_categories(
    record: &AdmissionRecord,
    category_map: &[u32],
    n_categories: usize,
) -> Result<CategoryIndicator> {
    let mut ones = Vec::with_capacity(record.secondaries.len() + 1);
    for code in record.codes() {
        let cat = *category_map.get(code.index()).ok_or_else(|| {
            Error::InvalidInput(format!(
                "admission {}: code {} has no category",
                record.admission_id, code.0
            ))
        })?;
        if cat as usize >= n_categories {
            return Err(Error::InvalidInput(format!(
                "category {cat} out of range for {n_categories} categories"
            )));
        }
        ones.push(cat);
    }
    ones.sort_unstable();
    ones.dedup();
    Ok(CategoryIndicator {
        len: n_categories,
        ones,
    })
}
