//! Synthetic claims generator with planted hospital effects.
//!
//! The outcome model is fully known, so estimated hospital effects can be
//! scored against truth. In nonlinear mode the generator adds exactly the
//! structure a category-indicator logistic model cannot express: a U-shaped
//! age curve, synergistic co-occurring diagnoses, gender-by-diagnosis effects
//! and code-level heterogeneity within categories.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::{AdmissionRecord, Cohort, Dataset, DiagnosisCode};
use crate::error::{Error, Result};
use crate::nn::EmbeddingTable;
use crate::util::{derive_rng, sigmoid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Linear,
    Nonlinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub hospitals: usize,
    pub vocab_size: usize,
    pub n_categories: usize,
    pub min_admissions: usize,
    pub max_admissions: usize,
    pub median_secondaries: usize,
    pub max_secondaries: usize,
    /// Shape of the negative-binomial secondary count.
    pub secondary_dispersion: f64,
    /// Probability that a secondary is drawn from the block of an existing code.
    pub cluster_prob: f64,
    /// Standard deviation of the planted hospital effects.
    pub tau: f64,
    pub base_rate: f64,
    /// Fixed global intercept; when absent it is solved to hit `base_rate`.
    pub mu_star: Option<f64>,
    pub nonlinearity: Nonlinearity,
    pub interaction_strength: f64,
    pub category_effect_sd: f64,
    /// Fraction of categories with a nonzero main effect.
    pub category_effect_density: f64,
    /// Linear age effect per 20 years.
    pub age_slope: f64,
    /// Log-scale spread of hospital-specific category popularity.
    pub case_mix_sd: f64,
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            hospitals: 200,
            vocab_size: 300,
            n_categories: 30,
            min_admissions: 400,
            max_admissions: 600,
            median_secondaries: 11,
            max_secondaries: 35,
            secondary_dispersion: 4.0,
            cluster_prob: 0.5,
            tau: 0.3,
            base_rate: 0.13,
            mu_star: None,
            nonlinearity: Nonlinearity::Nonlinear,
            interaction_strength: 0.5,
            category_effect_sd: 0.4,
            category_effect_density: 0.6,
            age_slope: 0.2,
            case_mix_sd: 0.8,
            embedding_dim: 32,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.hospitals == 0 {
            return err("hospitals must be positive".into());
        }
        if self.n_categories == 0 || self.vocab_size < self.n_categories {
            return err(format!(
                "need vocab_size ({}) >= n_categories ({}) >= 1",
                self.vocab_size, self.n_categories
            ));
        }
        if self.min_admissions > self.max_admissions {
            return err(format!(
                "min_admissions {} exceeds max_admissions {}",
                self.min_admissions, self.max_admissions
            ));
        }
        if self.max_secondaries >= self.vocab_size {
            return err(format!(
                "max_secondaries {} must be below vocab_size {}",
                self.max_secondaries, self.vocab_size
            ));
        }
        if self.median_secondaries > self.max_secondaries {
            return err("median_secondaries exceeds max_secondaries".into());
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return err(format!("tau must be >= 0, got {}", self.tau));
        }
        if !(self.base_rate > 0.0 && self.base_rate < 1.0) {
            return err(format!("base_rate must lie in (0, 1), got {}", self.base_rate));
        }
        if !(self.secondary_dispersion > 0.0) {
            return err("secondary_dispersion must be positive".into());
        }
        for (name, p) in [
            ("cluster_prob", self.cluster_prob),
            ("category_effect_density", self.category_effect_density),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return err(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        for (name, v) in [
            ("interaction_strength", self.interaction_strength),
            ("category_effect_sd", self.category_effect_sd),
            ("case_mix_sd", self.case_mix_sd),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("{name} must be >= 0, got {v}"));
            }
        }
        if self.embedding_dim == 0 {
            return err("embedding_dim must be positive".into());
        }
        Ok(())
    }
}

/// Age effect `linear * s + quadratic * s^2` with `s = (age - center) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgeCurve {
    pub center: f64,
    pub scale: f64,
    pub linear: f64,
    pub quadratic: f64,
}

impl AgeCurve {
    pub fn eval(&self, age: f64) -> f64 {
        let s = (age - self.center) / self.scale;
        self.linear * s + self.quadratic * s * s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEffect {
    pub a: u32,
    pub b: u32,
    pub effect: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeEffect {
    pub code: u32,
    pub effect: f64,
}

/// Secondary-count model actually used, reported with the ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SecondaryCountModel {
    pub nb_mean: f64,
    pub nb_dispersion: f64,
    pub truncation: usize,
    pub median: usize,
}

/// All planted generator parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGroundTruth {
    pub omega_star: Vec<f64>,
    pub mu_star: f64,
    pub age_curve: AgeCurve,
    /// Applied once per distinct category on the record.
    pub category_effects: Vec<f64>,
    /// Applied once per code; zero in linear mode.
    pub code_deviations: Vec<f64>,
    /// Sorted by `(a, b)` with `a < b`.
    pub pair_interactions: Vec<PairEffect>,
    /// Sorted by code.
    pub gender_by_code: Vec<CodeEffect>,
    pub code_category: Vec<u32>,
    pub cohort_of_category: Vec<Cohort>,
    pub secondary_count: SecondaryCountModel,
    pub generator: GeneratorConfig,
}

impl SyntheticGroundTruth {
    fn pair_effect(&self, a: u32, b: u32) -> f64 {
        let key = if a < b { (a, b) } else { (b, a) };
        self.pair_interactions
            .binary_search_by(|p| (p.a, p.b).cmp(&key))
            .map(|i| self.pair_interactions[i].effect)
            .unwrap_or(0.0)
    }

    fn gender_effect(&self, code: u32) -> f64 {
        self.gender_by_code
            .binary_search_by(|e| e.code.cmp(&code))
            .map(|i| self.gender_by_code[i].effect)
            .unwrap_or(0.0)
    }
}

/// True outcome logit for a hospital, raw `(age, gender)`, and the full set of codes.
pub fn true_logit_parts(
    hospital: usize,
    age: f64,
    gender: f64,
    codes: &[DiagnosisCode],
    gt: &SyntheticGroundTruth,
) -> f64 {
    let mut logit = gt.mu_star + gt.omega_star[hospital] + gt.age_curve.eval(age);
    let mut cats: Vec<u32> = codes.iter().map(|c| gt.code_category[c.index()]).collect();
    cats.sort_unstable();
    cats.dedup();
    for cat in cats {
        logit += gt.category_effects[cat as usize];
    }
    for c in codes {
        logit += gt.code_deviations[c.index()];
        if gender == 1.0 {
            logit += gt.gender_effect(c.0);
        }
    }
    if !gt.pair_interactions.is_empty() {
        for (i, a) in codes.iter().enumerate() {
            for b in &codes[i + 1..] {
                logit += gt.pair_effect(a.0, b.0);
            }
        }
    }
    logit
}

/// True logit of a record on its raw (unstandardized) features.
pub fn true_logit(record: &AdmissionRecord, gt: &SyntheticGroundTruth) -> f64 {
    let codes: Vec<DiagnosisCode> = record.codes().collect();
    true_logit_parts(
        record.hospital,
        record.sociodem[0],
        record.sociodem[1],
        &codes,
        gt,
    )
}

pub fn assign_cohort(primary: DiagnosisCode, gt: &SyntheticGroundTruth) -> Cohort {
    gt.cohort_of_category[gt.code_category[primary.index()] as usize]
}

/// Contiguous block assignment of codes to categories.
pub fn block_category_map(vocab_size: usize, n_categories: usize) -> Vec<u32> {
    (0..vocab_size)
        .map(|c| (c * n_categories / vocab_size) as u32)
        .collect()
}

fn cohort_blocks(n_categories: usize) -> Vec<Cohort> {
    (0..n_categories)
        .map(|c| Cohort::from_index(c * Cohort::ALL.len() / n_categories))
        .collect()
}

/// Normalized pmf of a negative binomial with the given mean and shape,
/// truncated to `0..=max`.
pub fn truncated_nb_pmf(mean: f64, shape: f64, max: usize) -> Vec<f64> {
    let p = shape / (shape + mean);
    let mut pmf = Vec::with_capacity(max + 1);
    let mut cur = p.powf(shape);
    for k in 0..=max {
        pmf.push(cur);
        cur *= (k as f64 + shape) / (k as f64 + 1.0) * (1.0 - p);
    }
    let total: f64 = pmf.iter().sum();
    pmf.iter_mut().for_each(|x| *x /= total);
    pmf
}

fn pmf_median(pmf: &[f64]) -> usize {
    let mut acc = 0.0;
    for (k, p) in pmf.iter().enumerate() {
        acc += p;
        if acc >= 0.5 {
            return k;
        }
    }
    pmf.len() - 1
}

/// Negative-binomial mean in the middle of the range whose truncated median
/// equals `target`.
pub fn nb_mean_for_median(target: usize, shape: f64, max: usize) -> Result<f64> {
    let mut lo = None;
    let mut hi = None;
    for step in 1..=12_000 {
        let m = step as f64 * 0.005;
        if pmf_median(&truncated_nb_pmf(m, shape, max)) == target {
            lo.get_or_insert(m);
            hi = Some(m);
        } else if lo.is_some() {
            break;
        }
    }
    match (lo, hi) {
        (Some(l), Some(h)) => Ok(0.5 * (l + h)),
        _ => Err(Error::Config(format!(
            "no negative binomial with shape {shape} truncated at {max} has median {target}"
        ))),
    }
}

struct Planted {
    gt: SyntheticGroundTruth,
    popularity: Vec<f64>,
    tilt: Vec<Vec<f64>>,
    members: Vec<Vec<u32>>,
}

fn plant(config: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<Planted> {
    let v = config.vocab_size;
    let c = config.n_categories;
    let k = config.hospitals;
    let s = config.interaction_strength;
    let nonlinear = config.nonlinearity == Nonlinearity::Nonlinear;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let code_category = block_category_map(v, c);
    let mut members = vec![Vec::new(); c];
    for (code, &cat) in code_category.iter().enumerate() {
        members[cat as usize].push(code as u32);
    }

    let mut omega_star: Vec<f64> = (0..k)
        .map(|_| config.tau * std_normal.sample(rng))
        .collect();
    let omega_mean = omega_star.iter().sum::<f64>() / k as f64;
    omega_star.iter_mut().for_each(|w| *w -= omega_mean);

    let category_effects: Vec<f64> = (0..c)
        .map(|_| {
            let active = rng.random_bool(config.category_effect_density);
            let e = config.category_effect_sd * std_normal.sample(rng);
            if active {
                e
            } else {
                0.0
            }
        })
        .collect();
    let code_sd = if nonlinear { 0.3 * s } else { 0.0 };
    let code_deviations: Vec<f64> = (0..v).map(|_| code_sd * std_normal.sample(rng)).collect();

    let mut pair_interactions = Vec::new();
    let mut gender_by_code = Vec::new();
    if nonlinear && s > 0.0 {
        for block in &members {
            if !rng.random_bool(0.5) {
                continue;
            }
            for (i, &a) in block.iter().enumerate() {
                for &b in &block[i + 1..] {
                    let effect = 0.25 * s * rng.random_range(0.5..1.5);
                    pair_interactions.push(PairEffect { a, b, effect });
                }
            }
        }
        for code in 0..v as u32 {
            if rng.random_bool(0.25) {
                gender_by_code.push(CodeEffect {
                    code,
                    effect: 0.5 * s * std_normal.sample(rng),
                });
            }
        }
    }
    pair_interactions.sort_by_key(|p| (p.a, p.b));

    let age_curve = AgeCurve {
        center: 60.0,
        scale: 20.0,
        linear: config.age_slope,
        quadratic: if nonlinear { 0.6 * s } else { 0.0 },
    };

    let popularity: Vec<f64> = (0..v).map(|_| (0.8 * std_normal.sample(rng)).exp()).collect();
    let tilt: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            (0..c)
                .map(|_| (config.case_mix_sd * std_normal.sample(rng)).exp())
                .collect()
        })
        .collect();

    let nb_mean = nb_mean_for_median(
        config.median_secondaries,
        config.secondary_dispersion,
        config.max_secondaries,
    )?;

    let gt = SyntheticGroundTruth {
        omega_star,
        mu_star: 0.0,
        age_curve,
        category_effects,
        code_deviations,
        pair_interactions,
        gender_by_code,
        code_category,
        cohort_of_category: cohort_blocks(c),
        secondary_count: SecondaryCountModel {
            nb_mean,
            nb_dispersion: config.secondary_dispersion,
            truncation: config.max_secondaries,
            median: config.median_secondaries,
        },
        generator: config.clone(),
    };
    Ok(Planted {
        gt,
        popularity,
        tilt,
        members,
    })
}

fn draw_count(rng: &mut ChaCha8Rng, model: &SecondaryCountModel) -> usize {
    let gamma = Gamma::new(model.nb_dispersion, model.nb_mean / model.nb_dispersion)
        .expect("valid gamma parameters");
    loop {
        let lambda: f64 = gamma.sample(rng);
        let d = if lambda > 0.0 {
            Poisson::new(lambda).expect("positive rate").sample(rng) as usize
        } else {
            0
        };
        if d <= model.truncation {
            return d;
        }
    }
}

fn draw_secondaries(
    rng: &mut ChaCha8Rng,
    count: usize,
    primary: u32,
    sampler: &WeightedIndex<f64>,
    planted: &Planted,
    cluster_prob: f64,
    present: &mut [bool],
) -> Vec<DiagnosisCode> {
    let mut codes = vec![primary];
    present[primary as usize] = true;
    let mut attempts = 0;
    while codes.len() < count + 1 {
        let candidate = if rng.random_bool(cluster_prob) {
            let anchor = codes[rng.random_range(0..codes.len())];
            let block = &planted.members[planted.gt.code_category[anchor as usize] as usize];
            block[rng.random_range(0..block.len())]
        } else {
            sampler.sample(rng) as u32
        };
        let candidate = if attempts > 200 {
            // dense fallback; terminates because count < vocab_size
            (0..present.len() as u32)
                .find(|&c| !present[c as usize])
                .expect("free code")
        } else {
            candidate
        };
        if present[candidate as usize] {
            attempts += 1;
            continue;
        }
        present[candidate as usize] = true;
        codes.push(candidate);
    }
    for &c in &codes {
        present[c as usize] = false;
    }
    codes[1..].iter().map(|&c| DiagnosisCode(c)).collect()
}

fn pretrained_table(config: &GeneratorConfig, code_category: &[u32], rng: &mut ChaCha8Rng) -> EmbeddingTable {
    let dim = config.embedding_dim;
    let centers: Vec<Vec<f64>> = (0..config.n_categories)
        .map(|_| {
            (0..dim)
                .map(|_| 0.5 * Normal::new(0.0, 1.0).unwrap().sample(rng))
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, 0.2).expect("normal");
    let mut data = Vec::with_capacity(config.vocab_size * dim);
    for &cat in code_category {
        for &c in &centers[cat as usize] {
            data.push(c + noise.sample(rng));
        }
    }
    EmbeddingTable {
        rows: config.vocab_size,
        dim,
        data,
        trainable: true,
    }
}

/// Intercept such that the mean predicted probability equals `target`.
fn solve_intercept(offsets: &[f64], target: f64) -> f64 {
    let (mut lo, mut hi) = (-30.0, 30.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let rate = offsets.iter().map(|o| sigmoid(mid + o)).sum::<f64>() / offsets.len() as f64;
        if rate < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Generates a dataset and its ground truth. Deterministic in `config.seed`.
pub fn generate(config: &GeneratorConfig) -> Result<(Dataset, SyntheticGroundTruth)> {
    config.validate()?;
    let mut rng = derive_rng(config.seed, &[1]);
    let mut planted = plant(config, &mut rng)?;

    let age_dist = Normal::new(60.0f64, 20.0).expect("age normal");
    let mut present = vec![false; config.vocab_size];
    let mut records = Vec::new();
    let mut covariate_rng = derive_rng(config.seed, &[2]);
    for k in 0..config.hospitals {
        let weights: Vec<f64> = planted
            .popularity
            .iter()
            .zip(&planted.gt.code_category)
            .map(|(p, &cat)| p * planted.tilt[k][cat as usize])
            .collect();
        let sampler = WeightedIndex::new(&weights).expect("positive weights");
        let n_k = covariate_rng.random_range(config.min_admissions..=config.max_admissions);
        for _ in 0..n_k {
            let rng = &mut covariate_rng;
            let age = age_dist.sample(rng).clamp(18.0, 100.0).round();
            let gender = if rng.random_bool(0.54) { 1.0 } else { 0.0 };
            let primary = sampler.sample(rng) as u32;
            let count = draw_count(rng, &planted.gt.secondary_count);
            let secondaries = draw_secondaries(
                rng,
                count,
                primary,
                &sampler,
                &planted,
                config.cluster_prob,
                &mut present,
            );
            records.push(AdmissionRecord {
                admission_id: records.len() as u64,
                hospital: k,
                primary: DiagnosisCode(primary),
                secondaries,
                sociodem: vec![age, gender],
                outcome: 0,
                cohort: assign_cohort(DiagnosisCode(primary), &planted.gt),
            });
        }
    }

    let offsets: Vec<f64> = records.iter().map(|r| true_logit(r, &planted.gt)).collect();
    let mu = config
        .mu_star
        .unwrap_or_else(|| solve_intercept(&offsets, config.base_rate));
    planted.gt.mu_star = mu;

    let mut outcome_rng = derive_rng(config.seed, &[3]);
    for (r, o) in records.iter_mut().zip(&offsets) {
        r.outcome = outcome_rng.random_bool(sigmoid(mu + o)) as u8;
    }

    let mut emb_rng = derive_rng(config.seed, &[4]);
    let table = pretrained_table(config, &planted.gt.code_category, &mut emb_rng);
    let gt = planted.gt;
    let dataset = Dataset {
        records,
        hospitals: config.hospitals,
        vocab_size: config.vocab_size,
        sociodem_dim: 2,
        n_categories: config.n_categories,
        category_map: gt.code_category.clone(),
        max_secondaries: config.max_secondaries,
        ground_truth: Some(gt.clone()),
        pretrained_embeddings: Some(table),
    };
    Ok((dataset, gt))
}
