use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{weighted_bce, ClassWeights};
use super::trainer::loss_and_grad;
use crate::error::{Error, Result};
use crate::nn::{forward, BatchTensor, Mode, ModelDims, ModelKind, NnArchitecture, NnParameters, ParamSet};
use crate::util::{derive_rng, derive_seed};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;
const DROPOUT_SEED: u64 = 0x9C;
const LAMBDA: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    /// Entries where both gradients are exactly zero.
    pub inactive: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub inactive: usize,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, 1e-5)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

fn objective(params: &NnParameters, batch: &BatchTensor, weights: ClassWeights) -> Result<f64> {
    // the same mask the single shard of `loss_and_grad` draws
    let (probs, _) = forward(params, batch, Mode::Train, derive_seed(DROPOUT_SEED, &[0]))?;
    let (bce, _) = weighted_bce(&probs, &batch.outcome, weights, 1e-300)?;
    Ok(bce + LAMBDA * params.alpha.iter().map(|a| a * a).sum::<f64>())
}

/// A random network and batch for `arch`, with nonzero hospital weights
/// and hidden biases.
pub fn grad_check_fixture(kind: ModelKind, arch: &NnArchitecture, seed: u64) -> Result<(NnParameters, BatchTensor)> {
    if arch.embedding_dim > 8 || arch.lq_width > 16 || arch.lp_width > 16 {
        return Err(Error::Config("gradient checks need embedding_dim <= 8 and widths <= 16".into()));
    }
    let dims = ModelDims { vocab_size: 12, hospitals: 3, sociodem_dim: 2 };
    let mut params = NnParameters::init(kind, arch, dims, 0.3, None, seed)?;
    let mut rng = derive_rng(seed, &[0x6C]);
    for a in params.alpha.iter_mut() {
        *a = rng.random_range(-0.5..0.5);
    }
    // zero biases put fully masked rows exactly on a rectifier kink
    for layer in params.lq.iter_mut().chain(params.lp.iter_mut()) {
        layer.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
    }
    params.mark_updated();
    let n = 16;
    let max_len = 5;
    let mut secondaries = vec![u32::MAX; n * max_len];
    let mut lengths = Vec::with_capacity(n);
    for i in 0..n {
        let len = rng.random_range(0..=max_len);
        let mut codes: Vec<u32> = (0..12).collect();
        for j in 0..len {
            let k = rng.random_range(j..12);
            codes.swap(j, k);
        }
        secondaries[i * max_len..i * max_len + len].copy_from_slice(&codes[..len]);
        lengths.push(len);
    }
    let batch = BatchTensor {
        n,
        max_len,
        secondaries,
        lengths,
        primary: (0..n).map(|_| rng.random_range(0..12)).collect(),
        sociodem_dim: 2,
        sociodem: (0..2 * n).map(|_| rng.random_range(-1.5..1.5)).collect(),
        hospital: (0..n).map(|_| rng.random_range(0..3)).collect(),
        outcome: (0..n).map(|_| rng.random_bool(0.4) as u8 as f64).collect(),
    };
    Ok((params, batch))
}

/// Central finite differences against the analytic gradient for every entry.
pub fn grad_check_on(params: &NnParameters, batch: &BatchTensor) -> Result<GradCheckReport> {
    let weights = ClassWeights { pos: 1.5, neg: 0.75 };
    let (_, analytic) = loss_and_grad(params, batch, weights, LAMBDA, 1e-300, Mode::Train, DROPOUT_SEED)?;
    if batch.n > super::trainer::SHARD_ROWS {
        return Err(Error::Config(format!("gradient checks need at most {} rows", super::trainer::SHARD_ROWS)));
    }
    let names: Vec<String> = params.tensors().iter().map(|t| t.name.clone()).collect();
    let analytic: Vec<Vec<f64>> = analytic.tensors().iter().map(|t| t.data.to_vec()).collect();
    let mut work = params.clone();
    let mut tensors = Vec::new();
    for (ti, name) in names.into_iter().enumerate() {
        let len = analytic[ti].len();
        let mut check = TensorCheck { name, entries: len, max_rel_error: 0.0, inactive: 0 };
        for j in 0..len {
            let original = work.tensors()[ti].data[j];
            let mut eval_at = |v: f64| -> Result<f64> {
                work.tensors_mut()[ti].data[j] = v;
                work.mark_updated();
                objective(&work, batch, weights)
            };
            let plus = eval_at(original + FD_STEP)?;
            let minus = eval_at(original - FD_STEP)?;
            eval_at(original)?;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[ti][j];
            if a == 0.0 && numeric == 0.0 {
                check.inactive += 1;
                continue;
            }
            check.max_rel_error = check.max_rel_error.max(relative_error(a, numeric));
        }
        tensors.push(check);
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    let inactive = tensors.iter().map(|t| t.inactive).sum();
    Ok(GradCheckReport { tensors, max_rel_error, inactive, passed: max_rel_error < GRAD_CHECK_TOLERANCE })
}

/// Gradient check of the proposed model on a random fixture.
pub fn grad_check(arch: &NnArchitecture, seed: u64) -> Result<GradCheckReport> {
    let (params, batch) = grad_check_fixture(ModelKind::Proposed, arch, seed)?;
    grad_check_on(&params, &batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Pooling;

    fn arch() -> NnArchitecture {
        NnArchitecture { embedding_dim: 4, lq_layers: 1, lq_width: 6, lp_layers: 2, lp_width: 5, dropout: 0.25, pooling: Pooling::default() }
    }

    #[test]
    fn seed_zero_passes() {
        let r = grad_check(&arch(), 0).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.tensors.len(), 10);
    }

    #[test]
    fn twenty_seeds_pass() {
        for seed in 0..20 {
            let r = grad_check(&arch(), seed).unwrap();
            assert!(r.passed, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn fully_nonlinear_and_shallow_variants_pass() {
        let shallow = NnArchitecture { lq_layers: 0, lp_layers: 0, ..arch() };
        for a in [arch(), shallow] {
            let (p, b) = grad_check_fixture(ModelKind::FullyNonlinear, &a, 3).unwrap();
            let r = grad_check_on(&p, &b).unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn zero_weight_net_flags_dead_paths() {
        let (mut p, b) = grad_check_fixture(ModelKind::Proposed, &arch(), 1).unwrap();
        let alpha = p.alpha.clone();
        let bias = p.bias();
        for t in p.tensors_mut() {
            t.data.fill(0.0);
        }
        p.alpha = alpha;
        p.set_bias(bias);
        let r = grad_check_on(&p, &b).unwrap();
        assert!(r.passed);
        assert!(r.inactive > 0);
        let hidden = r.tensors.iter().find(|t| t.name == "lp.0.weight").unwrap();
        assert_eq!(hidden.inactive, hidden.entries);
        assert_eq!(hidden.max_rel_error, 0.0);
    }

    #[test]
    fn oversized_arch_is_rejected() {
        let big = NnArchitecture { lp_width: 64, ..arch() };
        assert!(grad_check(&big, 0).is_err());
    }
}
