//! Forward and backward passes with exact analytic gradients.

use rand::Rng;

use super::batch::PAD;
use super::{BatchTensor, Dense, EmbeddingTable, ModelKind, NnParameters};
use crate::error::{Error, Result};
use crate::util::{derive_rng, sigmoid};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Inverted dropout after every hidden layer.
    Train,
    Eval,
}

/// Rows of `table` for each code, in input order.
pub fn embed(codes: &[u32], table: &EmbeddingTable) -> Result<Vec<Vec<f64>>> {
    codes
        .iter()
        .map(|&c| {
            if (c as usize) < table.rows {
                Ok(table.row(c as usize).to_vec())
            } else {
                Err(Error::InvalidInput(format!(
                    "code {c} outside vocabulary of {}",
                    table.rows
                )))
            }
        })
        .collect()
}

/// Sum, min and max decompositions of a set of equal-length vectors,
/// concatenated. The empty set pools to zeros. Summation runs in a canonical
/// (lexicographic) order so the result does not depend on input order.
pub fn pool(rows: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; 3 * dim];
    if rows.is_empty() {
        return out;
    }
    let mut order: Vec<&Vec<f64>> = rows.iter().collect();
    order.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let (sum, rest) = out.split_at_mut(dim);
    let (min, max) = rest.split_at_mut(dim);
    min.fill(f64::INFINITY);
    max.fill(f64::NEG_INFINITY);
    for row in order {
        for d in 0..dim {
            sum[d] += row[d];
            min[d] = min[d].min(row[d]);
            max[d] = max[d].max(row[d]);
        }
    }
    out
}

struct LayerTrace {
    input: Vec<f64>,
    pre: Vec<f64>,
    mask: Option<Vec<f64>>,
}

/// Activations retained for the backward pass.
pub struct ForwardCache {
    version: u64,
    kind: ModelKind,
    n: usize,
    pooled: Vec<f64>,
    /// Code selected by min / max pooling per `(record, component)`, or PAD.
    arg_min: Vec<u32>,
    arg_max: Vec<u32>,
    lq: Vec<LayerTrace>,
    lp: Vec<LayerTrace>,
    head_input: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

pub(crate) enum MaskPlan<'a> {
    Off,
    Seeded(u64),
    #[cfg_attr(not(test), allow(dead_code))]
    Fixed(&'a [Vec<f64>]),
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `x` is `n x x_dim`; `hot` adds column `x_dim + hot[i]` for row `i`.
fn dense_forward(layer: &Dense, x: &[f64], x_dim: usize, n: usize, hot: Option<&[usize]>) -> Vec<f64> {
    let mut out = vec![0.0; n * layer.outputs];
    for i in 0..n {
        let xi = &x[i * x_dim..(i + 1) * x_dim];
        for o in 0..layer.outputs {
            let row = &layer.weight[o * layer.inputs..(o + 1) * layer.inputs];
            let mut acc = layer.bias[o] + dot(&row[..x_dim], xi);
            if let Some(h) = hot {
                acc += row[x_dim + h[i]];
            }
            out[i * layer.outputs + o] = acc;
        }
    }
    out
}

/// Accumulates weight/bias gradients into `grad` and returns `d x` when asked.
fn dense_backward(
    layer: &Dense,
    grad: &mut Dense,
    x: &[f64],
    x_dim: usize,
    n: usize,
    hot: Option<&[usize]>,
    d_out: &[f64],
    want_dx: bool,
) -> Option<Vec<f64>> {
    let mut dx = if want_dx { vec![0.0; n * x_dim] } else { Vec::new() };
    for i in 0..n {
        let xi = &x[i * x_dim..(i + 1) * x_dim];
        for o in 0..layer.outputs {
            let g = d_out[i * layer.outputs + o];
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let grow = &mut grad.weight[o * layer.inputs..(o + 1) * layer.inputs];
            axpy(g, xi, &mut grow[..x_dim]);
            if let Some(h) = hot {
                grow[x_dim + h[i]] += g;
            }
            if want_dx {
                let wrow = &layer.weight[o * layer.inputs..o * layer.inputs + x_dim];
                axpy(g, wrow, &mut dx[i * x_dim..(i + 1) * x_dim]);
            }
        }
    }
    want_dx.then_some(dx)
}

fn ensure_finite(values: &[f64], layer: &str) -> Result<()> {
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::numerical(layer, format!("non-finite activation {v}")));
    }
    Ok(())
}

fn check_batch(params: &NnParameters, batch: &BatchTensor) -> Result<()> {
    if batch.sociodem_dim != params.dims.sociodem_dim {
        return Err(Error::Shape(format!(
            "batch has {} socio-demographic features, model expects {}",
            batch.sociodem_dim, params.dims.sociodem_dim
        )));
    }
    let v = params.dims.vocab_size as u32;
    for i in 0..batch.n {
        if batch.primary[i] >= v || batch.secondaries_of(i).iter().any(|&c| c >= v) {
            return Err(Error::InvalidInput(format!("row {i}: code outside vocabulary of {v}")));
        }
        if batch.hospital[i] >= params.dims.hospitals {
            return Err(Error::InvalidInput(format!(
                "row {i}: hospital {} outside {}",
                batch.hospital[i], params.dims.hospitals
            )));
        }
    }
    Ok(())
}

/// Primary embedding plus the enabled pools for every row.
fn pool_batch(params: &NnParameters, batch: &BatchTensor) -> (Vec<f64>, Vec<u32>, Vec<u32>) {
    let b = params.arch.embedding_dim;
    let width = params.arch.pooled_dim();
    let pools = params.arch.pooling;
    let table = &params.embedding;
    let mut pooled = vec![0.0; batch.n * width];
    let mut arg_min = vec![PAD; batch.n * b];
    let mut arg_max = vec![PAD; batch.n * b];
    let mut sum = vec![0.0; b];
    let mut min = vec![0.0; b];
    let mut max = vec![0.0; b];
    let mut codes: Vec<u32> = Vec::with_capacity(batch.max_len);
    for i in 0..batch.n {
        codes.clear();
        codes.extend_from_slice(batch.secondaries_of(i));
        codes.sort_unstable();
        sum.fill(0.0);
        let (amin, amax) = (&mut arg_min[i * b..(i + 1) * b], &mut arg_max[i * b..(i + 1) * b]);
        if codes.is_empty() {
            min.fill(0.0);
            max.fill(0.0);
        } else {
            min.fill(f64::INFINITY);
            max.fill(f64::NEG_INFINITY);
            for &c in &codes {
                let row = table.row(c as usize);
                for d in 0..b {
                    let v = row[d];
                    sum[d] += v;
                    if v < min[d] {
                        min[d] = v;
                        amin[d] = c;
                    }
                    if v > max[d] {
                        max[d] = v;
                        amax[d] = c;
                    }
                }
            }
        }
        let out = &mut pooled[i * width..(i + 1) * width];
        out[..b].copy_from_slice(table.row(batch.primary[i] as usize));
        let mut off = b;
        for (enabled, src) in [(pools.sum, &sum), (pools.min, &min), (pools.max, &max)] {
            if enabled {
                out[off..off + b].copy_from_slice(src);
                off += b;
            }
        }
    }
    (pooled, arg_min, arg_max)
}

fn dropout_mask(rate: f64, len: usize, seed: u64, layer: u64) -> Vec<f64> {
    let mut rng = derive_rng(seed, &[0xD0, layer]);
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

fn hidden_stack(
    layers: &[Dense],
    mut x: Vec<f64>,
    mut x_dim: usize,
    n: usize,
    hot: Option<&[usize]>,
    masks: &MaskPlan<'_>,
    rate: f64,
    mask_offset: usize,
    group: &str,
) -> Result<(Vec<LayerTrace>, Vec<f64>)> {
    let mut traces = Vec::with_capacity(layers.len());
    for (li, layer) in layers.iter().enumerate() {
        let layer_hot = if li == 0 { hot } else { None };
        let pre = dense_forward(layer, &x, x_dim, n, layer_hot);
        ensure_finite(&pre, &format!("{group}.{li}"))?;
        let mask = match masks {
            MaskPlan::Off => None,
            MaskPlan::Seeded(_) if rate == 0.0 => None,
            MaskPlan::Seeded(seed) => Some(dropout_mask(rate, pre.len(), *seed, (mask_offset + li) as u64)),
            MaskPlan::Fixed(all) => Some(all[mask_offset + li].clone()),
        };
        let mut act: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
        if let Some(m) = &mask {
            act.iter_mut().zip(m).for_each(|(a, k)| *a *= k);
        }
        traces.push(LayerTrace { input: x, pre, mask });
        x = act;
        x_dim = layer.outputs;
    }
    Ok((traces, x))
}

pub(crate) fn run_forward(params: &NnParameters, batch: &BatchTensor, masks: MaskPlan<'_>) -> Result<ForwardCache> {
    check_batch(params, batch)?;
    let n = batch.n;
    let arch = &params.arch;
    let (pooled, arg_min, arg_max) = pool_batch(params, batch);
    ensure_finite(&pooled, "embedding")?;

    let (lq, u) = hidden_stack(
        &params.lq,
        pooled.clone(),
        arch.pooled_dim(),
        n,
        None,
        &masks,
        arch.dropout,
        0,
        "lq",
    )?;
    let u_dim = arch.lq_output_dim();
    let m = params.dims.sociodem_dim;
    let fusion_dim = u_dim + m;
    let mut fusion = vec![0.0; n * fusion_dim];
    for i in 0..n {
        fusion[i * fusion_dim..i * fusion_dim + u_dim].copy_from_slice(&u[i * u_dim..(i + 1) * u_dim]);
        fusion[i * fusion_dim + u_dim..(i + 1) * fusion_dim].copy_from_slice(batch.sociodem_of(i));
    }
    ensure_finite(&fusion, "fusion")?;

    let hot = match params.kind {
        ModelKind::FullyNonlinear => Some(batch.hospital.as_slice()),
        ModelKind::Proposed => None,
    };
    let (lp, v) = hidden_stack(
        &params.lp,
        fusion,
        fusion_dim,
        n,
        hot,
        &masks,
        arch.dropout,
        params.lq.len(),
        "lp",
    )?;
    let (head_input, head_dim, head_hot) = if params.lp.is_empty() {
        (v, fusion_dim, hot)
    } else {
        (v, arch.lp_width, None)
    };
    let mut logits = dense_forward(&params.output, &head_input, head_dim, n, head_hot);
    if params.kind == ModelKind::Proposed {
        for (l, &h) in logits.iter_mut().zip(&batch.hospital) {
            *l += params.alpha[h];
        }
    }
    ensure_finite(&logits, "output")?;
    let probs = logits.iter().map(|&l| sigmoid(l)).collect();
    Ok(ForwardCache {
        version: params.version,
        kind: params.kind,
        n,
        pooled,
        arg_min,
        arg_max,
        lq,
        lp,
        head_input,
        logits,
        probs,
    })
}

/// Forward pass. Returns probabilities and the cache needed by [`backward`].
/// `dropout_seed` only matters in [`Mode::Train`].
pub fn forward(
    params: &NnParameters,
    batch: &BatchTensor,
    mode: Mode,
    dropout_seed: u64,
) -> Result<(Vec<f64>, ForwardCache)> {
    let plan = match mode {
        Mode::Train => MaskPlan::Seeded(dropout_seed),
        Mode::Eval => MaskPlan::Off,
    };
    let cache = run_forward(params, batch, plan)?;
    Ok((cache.probs.clone(), cache))
}

/// Forward pass of the variant without a linear hospital head.
pub fn forward_fully_nonlinear(
    params: &NnParameters,
    batch: &BatchTensor,
    mode: Mode,
    dropout_seed: u64,
) -> Result<(Vec<f64>, ForwardCache)> {
    if params.kind != ModelKind::FullyNonlinear {
        return Err(Error::InvalidInput(
            "parameters belong to the proposed model, not the fully non-linear variant".into(),
        ));
    }
    forward(params, batch, mode, dropout_seed)
}

fn backprop_stack(
    layers: &[Dense],
    grads: &mut [Dense],
    traces: &[LayerTrace],
    mut d_out: Vec<f64>,
    first_dim: usize,
    n: usize,
    hot: Option<&[usize]>,
    want_input_grad: bool,
) -> Option<Vec<f64>> {
    for li in (0..layers.len()).rev() {
        let t = &traces[li];
        if let Some(m) = &t.mask {
            d_out.iter_mut().zip(m).for_each(|(d, k)| *d *= k);
        }
        d_out.iter_mut().zip(&t.pre).for_each(|(d, &p)| {
            if p <= 0.0 {
                *d = 0.0;
            }
        });
        let x_dim = if li == 0 { first_dim } else { layers[li - 1].outputs };
        let layer_hot = if li == 0 { hot } else { None };
        let want = li > 0 || want_input_grad;
        d_out = dense_backward(&layers[li], &mut grads[li], &t.input, x_dim, n, layer_hot, &d_out, want)?;
    }
    Some(d_out)
}

/// Exact gradients of a loss with respect to every parameter, given
/// `d_logits[i] = dL / d logit_i`. Min/max pooling routes each component's
/// gradient to the selected code only; ties go to the lowest code.
pub fn backward(
    params: &NnParameters,
    batch: &BatchTensor,
    cache: &ForwardCache,
    d_logits: &[f64],
) -> Result<NnParameters> {
    if cache.version != params.version || cache.kind != params.kind || cache.n != batch.n {
        return Err(Error::InvalidInput(
            "forward cache does not match these parameters or this batch".into(),
        ));
    }
    if d_logits.len() != batch.n {
        return Err(Error::Shape(format!(
            "{} loss gradients for {} rows",
            d_logits.len(),
            batch.n
        )));
    }
    let n = batch.n;
    let arch = &params.arch;
    let mut grads = params.zeros_like();
    if params.kind == ModelKind::Proposed {
        for (&g, &h) in d_logits.iter().zip(&batch.hospital) {
            grads.alpha[h] += g;
        }
    }
    let hot = match params.kind {
        ModelKind::FullyNonlinear => Some(batch.hospital.as_slice()),
        ModelKind::Proposed => None,
    };
    let u_dim = arch.lq_output_dim();
    let fusion_dim = params.fusion_dim();
    let (head_dim, head_hot) = if params.lp.is_empty() {
        (fusion_dim, hot)
    } else {
        (arch.lp_width, None)
    };
    let d_head = dense_backward(
        &params.output,
        &mut grads.output,
        &cache.head_input,
        head_dim,
        n,
        head_hot,
        d_logits,
        true,
    )
    .expect("requested input gradient");
    let d_fusion = if params.lp.is_empty() {
        d_head
    } else {
        backprop_stack(&params.lp, &mut grads.lp, &cache.lp, d_head, fusion_dim, n, hot, true)
            .expect("requested input gradient")
    };
    let mut d_u = vec![0.0; n * u_dim];
    for i in 0..n {
        d_u[i * u_dim..(i + 1) * u_dim].copy_from_slice(&d_fusion[i * fusion_dim..i * fusion_dim + u_dim]);
    }
    let d_pooled = if params.lq.is_empty() {
        d_u
    } else {
        backprop_stack(&params.lq, &mut grads.lq, &cache.lq, d_u, arch.pooled_dim(), n, None, true)
            .expect("requested input gradient")
    };

    let b = arch.embedding_dim;
    let width = arch.pooled_dim();
    let pools = arch.pooling;
    let table = &mut grads.embedding;
    for i in 0..n {
        let d = &d_pooled[i * width..(i + 1) * width];
        axpy(1.0, &d[..b], table.row_mut(batch.primary[i] as usize));
        let mut off = b;
        if pools.sum {
            for &c in batch.secondaries_of(i) {
                axpy(1.0, &d[off..off + b], table.row_mut(c as usize));
            }
            off += b;
        }
        for (enabled, args) in [(pools.min, &cache.arg_min), (pools.max, &cache.arg_max)] {
            if !enabled {
                continue;
            }
            for k in 0..b {
                let c = args[i * b + k];
                if c != PAD {
                    table.data[c as usize * b + k] += d[off + k];
                }
            }
            off += b;
        }
    }
    let _ = &cache.pooled;
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ModelDims, NnArchitecture, ParamSet, Pooling};
    use crate::util::logit;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    fn batch_from(rows: &[(usize, u32, Vec<u32>, [f64; 2], f64)]) -> BatchTensor {
        let n = rows.len();
        let max_len = rows.iter().map(|r| r.2.len()).max().unwrap_or(0);
        let mut secondaries = vec![PAD; n * max_len];
        for (i, r) in rows.iter().enumerate() {
            secondaries[i * max_len..i * max_len + r.2.len()].copy_from_slice(&r.2);
        }
        BatchTensor {
            n,
            max_len,
            secondaries,
            lengths: rows.iter().map(|r| r.2.len()).collect(),
            primary: rows.iter().map(|r| r.1).collect(),
            sociodem_dim: 2,
            sociodem: rows.iter().flat_map(|r| r.3).collect(),
            hospital: rows.iter().map(|r| r.0).collect(),
            outcome: rows.iter().map(|r| r.4).collect(),
        }
    }

    fn sample_batch() -> BatchTensor {
        batch_from(&[
            (0, 1, vec![2, 5, 7], [0.3, 1.0], 1.0),
            (1, 4, vec![], [-1.2, 0.0], 0.0),
            (2, 0, vec![9, 3], [0.8, 1.0], 0.0),
            (1, 6, vec![1, 8, 2, 4], [0.1, 0.0], 1.0),
        ])
    }

    fn dims() -> ModelDims {
        ModelDims { vocab_size: 10, hospitals: 3, sociodem_dim: 2 }
    }

    fn small_arch() -> NnArchitecture {
        NnArchitecture { embedding_dim: 4, lq_layers: 1, lq_width: 5, lp_layers: 2, lp_width: 6, dropout: 0.25, pooling: Pooling::default() }
    }

    #[test]
    fn embed_identity_table() {
        let mut table = EmbeddingTable { rows: 4, dim: 4, data: vec![0.0; 16], trainable: true };
        for i in 0..4 {
            table.data[i * 4 + i] = 1.0;
        }
        assert_eq!(embed(&[2], &table).unwrap(), vec![vec![0.0, 0.0, 1.0, 0.0]]);
        let rows = embed(&[3, 3], &table).unwrap();
        assert_eq!(rows[0], rows[1]);
        assert!(embed(&[4], &table).is_err());
    }

    #[test]
    fn pool_examples() {
        let out = pool(&[vec![1.0, 2.0], vec![3.0, 4.0]], 2);
        assert_eq!(out, vec![4.0, 6.0, 1.0, 2.0, 3.0, 4.0]);
        let v = vec![0.5, -1.5, 2.0];
        let out = pool(std::slice::from_ref(&v), 3);
        assert_eq!(out, [v.clone(), v.clone(), v].concat());
        assert_eq!(pool(&[], 2), vec![0.0; 6]);
    }

    #[test]
    fn pool_is_permutation_invariant_bitwise() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.random::<f64>() * 1e3 - 5e2).collect()).collect();
        let reference = pool(&rows, 3);
        for _ in 0..50 {
            let mut p = rows.clone();
            p.shuffle(&mut rng);
            let out = pool(&p, 3);
            assert!(out.iter().zip(&reference).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn zero_network_predicts_bias() {
        let arch = small_arch();
        let mut p = NnParameters::init(ModelKind::Proposed, &arch, dims(), 0.13, None, 1).unwrap();
        let b = p.bias();
        for t in p.tensors_mut() {
            t.data.fill(0.0);
        }
        p.set_bias(b);
        assert!((b - logit(0.13)).abs() < 1e-15);
        let (probs, _) = forward(&p, &sample_batch(), Mode::Eval, 0).unwrap();
        for y in probs {
            assert!((y - 0.13).abs() < 1e-15);
        }
    }

    #[test]
    fn alpha_enters_additively() {
        let p = NnParameters::init(ModelKind::Proposed, &small_arch(), dims(), 0.2, None, 4).unwrap();
        let batch = sample_batch();
        let before = run_forward(&p, &batch, MaskPlan::Off).unwrap().logits;
        let mut q = p.clone();
        q.alpha[1] += 1.0;
        let after = run_forward(&q, &batch, MaskPlan::Off).unwrap().logits;
        for i in 0..batch.n {
            let delta = after[i] - before[i];
            if batch.hospital[i] == 1 {
                assert!((delta - 1.0).abs() < 1e-12);
            } else {
                assert_eq!(delta, 0.0);
            }
        }
    }

    #[test]
    fn eval_mode_is_deterministic_and_train_mode_depends_on_seed() {
        let p = NnParameters::init(ModelKind::Proposed, &small_arch(), dims(), 0.2, None, 4).unwrap();
        let batch = sample_batch();
        let (a, _) = forward(&p, &batch, Mode::Eval, 1).unwrap();
        let (b, _) = forward(&p, &batch, Mode::Eval, 2).unwrap();
        assert_eq!(a, b);
        let (c, _) = forward(&p, &batch, Mode::Train, 1).unwrap();
        let (d, _) = forward(&p, &batch, Mode::Train, 1).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let p = NnParameters::init(ModelKind::Proposed, &small_arch(), dims(), 0.2, None, 4).unwrap();
        let bad_code = batch_from(&[(0, 12, vec![], [0.0, 0.0], 0.0)]);
        assert!(forward(&p, &bad_code, Mode::Eval, 0).is_err());
        let bad_hospital = batch_from(&[(3, 1, vec![], [0.0, 0.0], 0.0)]);
        assert!(forward(&p, &bad_hospital, Mode::Eval, 0).is_err());
        let nan = batch_from(&[(0, 1, vec![], [f64::NAN, 0.0], 0.0)]);
        match forward(&p, &nan, Mode::Eval, 0) {
            Err(Error::Numerical { location, .. }) => assert_eq!(location, "fusion"),
            other => panic!("expected numerical error, got {:?}", other.map(|r| r.0)),
        }
        assert!(forward_fully_nonlinear(&p, &sample_batch(), Mode::Eval, 0).is_err());
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut p = NnParameters::init(ModelKind::Proposed, &small_arch(), dims(), 0.2, None, 4).unwrap();
        let batch = sample_batch();
        let (_, cache) = forward(&p, &batch, Mode::Eval, 0).unwrap();
        p.mark_updated();
        assert!(backward(&p, &batch, &cache, &[0.0; 4]).is_err());
    }

    #[test]
    fn alpha_gradient_is_per_hospital_sum() {
        let p = NnParameters::init(ModelKind::Proposed, &small_arch(), dims(), 0.2, None, 4).unwrap();
        let batch = sample_batch();
        let (_, cache) = forward(&p, &batch, Mode::Eval, 0).unwrap();
        let d = [0.5, -0.25, 2.0, 1.0];
        let g = backward(&p, &batch, &cache, &d).unwrap();
        assert_eq!(g.alpha, vec![0.5, 0.75, 2.0]);
    }

    #[test]
    fn empty_secondary_set_sends_no_pool_gradient() {
        let arch = NnArchitecture { embedding_dim: 3, lq_layers: 0, lp_layers: 1, lp_width: 4, dropout: 0.0, ..Default::default() };
        let p = NnParameters::init(ModelKind::Proposed, &arch, dims(), 0.3, None, 2).unwrap();
        let batch = batch_from(&[(0, 4, vec![], [0.2, 1.0], 1.0)]);
        let (_, cache) = forward(&p, &batch, Mode::Eval, 0).unwrap();
        let g = backward(&p, &batch, &cache, &[0.7]).unwrap();
        for code in 0..10 {
            let row = g.embedding.row(code);
            if code == 4 {
                assert!(row.iter().any(|&x| x != 0.0));
            } else {
                assert!(row.iter().all(|&x| x == 0.0), "code {code}");
            }
        }
    }

    #[test]
    fn ties_route_to_lowest_code() {
        let arch = NnArchitecture {
            embedding_dim: 2,
            lq_layers: 0,
            lp_layers: 0,
            dropout: 0.0,
            pooling: Pooling { sum: false, min: true, max: false },
            ..Default::default()
        };
        let mut p = NnParameters::init(ModelKind::Proposed, &arch, dims(), 0.3, None, 2).unwrap();
        p.embedding.data.fill(1.0);
        p.output.weight.fill(1.0);
        let batch = batch_from(&[(0, 0, vec![7, 3, 5], [0.0, 0.0], 1.0)]);
        let (_, cache) = forward(&p, &batch, Mode::Eval, 0).unwrap();
        let g = backward(&p, &batch, &cache, &[1.0]).unwrap();
        assert_eq!(g.embedding.row(3), &[1.0, 1.0]);
        assert_eq!(g.embedding.row(5), &[0.0, 0.0]);
        assert_eq!(g.embedding.row(7), &[0.0, 0.0]);
    }

    #[test]
    fn dropout_expectation_matches_eval_in_closed_form() {
        // single hidden layer of width 4: enumerate all 2^4 keep patterns
        let arch = NnArchitecture { embedding_dim: 2, lq_layers: 0, lp_layers: 1, lp_width: 4, dropout: 0.25, ..Default::default() };
        let mut p = NnParameters::init(ModelKind::Proposed, &arch, dims(), 0.3, None, 8).unwrap();
        p.lp[0].bias = vec![0.5, 0.4, 0.3, 0.2];
        let batch = batch_from(&[(1, 2, vec![3, 4], [0.4, 1.0], 0.0)]);
        let eval = run_forward(&p, &batch, MaskPlan::Off).unwrap().logits[0];
        let rate = arch.dropout;
        let mut expectation = 0.0;
        for pattern in 0u32..16 {
            let mask: Vec<f64> = (0..4).map(|j| if pattern >> j & 1 == 1 { 1.0 / (1.0 - rate) } else { 0.0 }).collect();
            let kept = pattern.count_ones() as i32;
            let prob = (1.0 - rate).powi(kept) * rate.powi(4 - kept);
            let masks = vec![mask];
            let logit = run_forward(&p, &batch, MaskPlan::Fixed(&masks)).unwrap().logits[0];
            expectation += prob * logit;
        }
        assert!((expectation - eval).abs() < 1e-12, "{expectation} vs {eval}");
    }

    #[test]
    fn single_hospital_fully_nonlinear_matches_transplant() {
        let one = ModelDims { vocab_size: 10, hospitals: 1, sociodem_dim: 2 };
        let arch = small_arch();
        let mut proposed = NnParameters::init(ModelKind::Proposed, &arch, one, 0.2, None, 3).unwrap();
        proposed.alpha[0] = 0.37;
        let mut full = NnParameters::init(ModelKind::FullyNonlinear, &arch, one, 0.2, None, 99).unwrap();
        full.embedding = proposed.embedding.clone();
        full.lq = proposed.lq.clone();
        for (dst, src) in full.lp.iter_mut().zip(&proposed.lp) {
            let extra = dst.inputs - src.inputs;
            for o in 0..dst.outputs {
                let row = &mut dst.weight[o * dst.inputs..(o + 1) * dst.inputs];
                row[..src.inputs].copy_from_slice(&src.weight[o * src.inputs..(o + 1) * src.inputs]);
                row[src.inputs..].fill(0.0);
                assert!(extra <= 1);
            }
            dst.bias = src.bias.clone();
        }
        full.output = proposed.output.clone();
        full.output.bias[0] += proposed.alpha[0];
        let mut batch = sample_batch();
        batch.hospital.fill(0);
        let (a, _) = forward(&proposed, &batch, Mode::Eval, 0).unwrap();
        let (b, _) = forward_fully_nonlinear(&full, &batch, Mode::Eval, 0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn secondary_order_does_not_change_outputs() {
        let p = NnParameters::init(ModelKind::FullyNonlinear, &small_arch(), dims(), 0.2, None, 4).unwrap();
        let a = batch_from(&[(2, 1, vec![2, 5, 7, 9], [0.3, 1.0], 1.0)]);
        let b = batch_from(&[(2, 1, vec![9, 7, 2, 5], [0.3, 1.0], 1.0)]);
        let (pa, _) = forward(&p, &a, Mode::Eval, 0).unwrap();
        let (pb, _) = forward(&p, &b, Mode::Eval, 0).unwrap();
        assert_eq!(pa[0].to_bits(), pb[0].to_bits());
    }
}
