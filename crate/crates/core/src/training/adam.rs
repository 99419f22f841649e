use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, one buffer per tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new<P: ParamSet>(params: &P) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
        OptimizerState {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Frozen tensors are left untouched.
/// Nothing is modified if any gradient is non-finite.
pub fn adam_step<P: ParamSet>(
    params: &mut P,
    grads: &P,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    let g = grads.tensors();
    {
        let p = params.tensors();
        if p.len() != g.len() || p.len() != state.m.len() {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        for ((pt, gt), m) in p.iter().zip(&g).zip(&state.m) {
            if pt.data.len() != gt.data.len() || pt.data.len() != m.len() {
                return Err(Error::Shape(format!("tensor {} has mismatched gradient or state", pt.name)));
            }
            if pt.trainable && gt.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::numerical(gt.name.clone(), "non-finite gradient"));
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((pt, gt), m), v) in params.tensors_mut().into_iter().zip(&g).zip(&mut state.m).zip(&mut state.v) {
        if !pt.trainable {
            continue;
        }
        for i in 0..pt.data.len() {
            let gi = gt.data[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            pt.data[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    params.mark_updated();
    Ok(())
}
