use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-class multipliers on the cross-entropy terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub pos: f64,
    pub neg: f64,
}

impl ClassWeights {
    pub const UNIT: ClassWeights = ClassWeights { pos: 1.0, neg: 1.0 };

    pub fn of(&self, outcome: f64) -> f64 {
        if outcome > 0.5 {
            self.pos
        } else {
            self.neg
        }
    }
}

/// `w_c = n / (2 n_c)`.
pub fn class_weights(outcomes: &[u8]) -> Result<ClassWeights> {
    let n = outcomes.len() as f64;
    let pos = outcomes.iter().filter(|&&y| y == 1).count() as f64;
    let neg = n - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::InvalidInput(format!(
            "class weights need both outcomes; got {pos} positive and {neg} negative"
        )));
    }
    Ok(ClassWeights { pos: n / (2.0 * pos), neg: n / (2.0 * neg) })
}

/// Summed weighted cross-entropy and its derivative with respect to each
/// logit. Clamped predictions contribute zero gradient.
pub fn weighted_bce(probs: &[f64], outcomes: &[f64], weights: ClassWeights, clamp_eps: f64) -> Result<(f64, Vec<f64>)> {
    if probs.len() != outcomes.len() {
        return Err(Error::Shape(format!("{} predictions for {} outcomes", probs.len(), outcomes.len())));
    }
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(probs.len());
    for (&p, &y) in probs.iter().zip(outcomes) {
        if !p.is_finite() || !y.is_finite() {
            return Err(Error::numerical("loss", format!("non-finite input (prediction {p}, outcome {y})")));
        }
        let w = weights.of(y);
        let clamped = p.clamp(clamp_eps, 1.0 - clamp_eps);
        total -= w * (y * clamped.ln() + (1.0 - y) * (1.0 - clamped).ln());
        grad.push(if clamped == p { w * (p - y) } else { 0.0 });
    }
    Ok((total, grad))
}

pub fn l2_penalty(alpha: &[f64], lambda: f64) -> f64 {
    lambda * alpha.iter().map(|a| a * a).sum::<f64>()
}

/// Weighted cross-entropy plus `lambda * sum(alpha^2)`.
pub fn loss(
    probs: &[f64],
    outcomes: &[f64],
    alpha: &[f64],
    lambda: f64,
    weights: ClassWeights,
    clamp_eps: f64,
) -> Result<f64> {
    if let Some(a) = alpha.iter().find(|a| !a.is_finite()) {
        return Err(Error::numerical("loss", format!("non-finite hospital weight {a}")));
    }
    let (bce, _) = weighted_bce(probs, outcomes, weights, clamp_eps)?;
    Ok(bce + l2_penalty(alpha, lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn class_weight_examples() {
        let mut y = vec![0u8; 100];
        y[..13].fill(1);
        let w = class_weights(&y).unwrap();
        assert!((w.pos - 100.0 / 26.0).abs() < 1e-15);
        assert!((w.neg - 100.0 / 174.0).abs() < 1e-15);
        assert!((13.0 * w.pos - 50.0).abs() < 1e-12 && (87.0 * w.neg - 50.0).abs() < 1e-12);
        assert_eq!(class_weights(&[0, 1, 1, 0]).unwrap(), ClassWeights::UNIT);
        assert!(class_weights(&[1, 1]).is_err());
        assert!(class_weights(&[]).is_err());
    }

    #[test]
    fn loss_examples() {
        let l = loss(&[0.5], &[1.0], &[0.0], 3.0, ClassWeights::UNIT, 1e-7).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let penalty = l2_penalty(&[0.1, -0.2], 1e-5);
        assert!((penalty - 5e-7).abs() < 1e-20);
        assert!(loss(&[f64::NAN], &[1.0], &[], 0.0, ClassWeights::UNIT, 1e-7).is_err());
    }

    #[test]
    fn unit_weights_match_direct_summation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let p: Vec<f64> = (0..500).map(|_| rng.random_range(0.01..0.99)).collect();
        let y: Vec<f64> = (0..500).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
        let mut oracle = 0.0;
        for i in 0..500 {
            oracle += if y[i] == 1.0 { -p[i].ln() } else { -(1.0 - p[i]).ln() };
        }
        let l = loss(&p, &y, &[], 0.0, ClassWeights::UNIT, 1e-7).unwrap();
        assert!((l - oracle).abs() < 1e-12 * oracle.max(1.0));
    }

    #[test]
    fn loss_increases_with_lambda() {
        let a = [0.3, -0.1];
        let values: Vec<f64> = [0.0, 1e-6, 1e-3, 1.0]
            .iter()
            .map(|&l| loss(&[0.2], &[0.0], &a, l, ClassWeights::UNIT, 1e-7).unwrap())
            .collect();
        assert!(values.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn clamped_predictions_have_zero_gradient() {
        let (l, g) = weighted_bce(&[0.0, 1.0, 0.25], &[1.0, 1.0, 0.0], ClassWeights { pos: 2.0, neg: 0.5 }, 1e-7).unwrap();
        assert_eq!(g, vec![0.0, 0.0, 0.125]);
        assert!((l - (-2.0 * 1e-7f64.ln() - 2.0 * (1.0f64 - 1e-7).ln() - 0.5 * 0.75f64.ln())).abs() < 1e-9);
    }
}
