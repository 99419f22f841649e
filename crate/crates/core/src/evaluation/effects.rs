use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ModelKind, NnParameters};
use crate::util::{mean, pearson, population_std, sigmoid};

/// Models with an additive per-hospital term on the logit scale.
pub trait HospitalEffectModel {
    /// Global bias and per-hospital weights.
    fn hospital_terms(&self) -> Result<(f64, &[f64])>;
}

impl HospitalEffectModel for NnParameters {
    fn hospital_terms(&self) -> Result<(f64, &[f64])> {
        match self.kind {
            ModelKind::Proposed => Ok((self.bias(), &self.alpha)),
            ModelKind::FullyNonlinear => Err(Error::NotInterpretable(
                "the fully non-linear variant mixes hospital identity into hidden layers".into(),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HospitalEffectEstimates {
    pub alpha: Vec<f64>,
    /// Bias plus the mean hospital weight.
    pub mu: f64,
    /// Centered hospital effects in logit units.
    pub omega: Vec<f64>,
    /// Population standard deviation of `omega`.
    pub tau_hat: f64,
    /// `sigmoid(mu + omega) - sigmoid(mu)`, in probability units.
    pub omega_prob: Vec<f64>,
}

pub fn extract_effects(model: &dyn HospitalEffectModel) -> Result<HospitalEffectEstimates> {
    let (bias, alpha) = model.hospital_terms()?;
    if alpha.is_empty() {
        return Err(Error::InvalidInput("model has no hospitals".into()));
    }
    let m = mean(alpha);
    let omega: Vec<f64> = alpha.iter().map(|a| a - m).collect();
    let mu = bias + m;
    Ok(HospitalEffectEstimates {
        alpha: alpha.to_vec(),
        mu,
        tau_hat: population_std(&omega),
        omega_prob: omega.iter().map(|w| sigmoid(mu + w) - sigmoid(mu)).collect(),
        omega,
    })
}

/// Paired effects of two models on the same hospitals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectComparison {
    pub omega_a: Vec<f64>,
    pub omega_b: Vec<f64>,
    pub rho: f64,
    /// `omega_b - omega_a`: vertical distance from the identity line.
    pub residuals: Vec<f64>,
}

impl EffectComparison {
    /// `hospital,omega_model,omega_baseline` rows, hospital labels from `ids`.
    pub fn to_csv(&self, ids: &[usize]) -> String {
        let mut out = String::from("hospital,omega_model,omega_baseline\n");
        for (k, (a, b)) in self.omega_a.iter().zip(&self.omega_b).enumerate() {
            let id = ids.get(k).copied().unwrap_or(k);
            out.push_str(&format!("{id},{a},{b}\n"));
        }
        out
    }
}

pub fn compare_effects(a: &HospitalEffectEstimates, b: &HospitalEffectEstimates) -> Result<EffectComparison> {
    compare_omegas(&a.omega, &b.omega)
}

pub fn compare_omegas(a: &[f64], b: &[f64]) -> Result<EffectComparison> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} hospitals against {}", a.len(), b.len())));
    }
    Ok(EffectComparison {
        omega_a: a.to_vec(),
        omega_b: b.to_vec(),
        rho: pearson(a, b).clamp(-1.0, 1.0),
        residuals: a.iter().zip(b).map(|(x, y)| y - x).collect(),
    })
}

/// Equal-width bins over `[min, max]`; returns `(bin center, count)`.
pub fn histogram(values: &[f64], bins: usize) -> Vec<(f64, usize)> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + (i as f64 + 0.5) * width, c))
        .collect()
}

pub fn histogram_csv(values: &[f64], bins: usize) -> String {
    let mut out = String::from("omega,bin_count\n");
    for (center, count) in histogram(values, bins) {
        out.push_str(&format!("{center},{count}\n"));
    }
    out
}
