use log::{debug, info};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, OptimizerState};
use super::loss::{class_weights, l2_penalty, weighted_bce, ClassWeights};
use super::schedule::{cyclical_lr, EarlyStopping};
use crate::data::{Dataset, SplitAssignment, SplitPart};
use crate::error::{Error, Result};
use crate::nn::{
    backward, forward, BatchTensor, EmbeddingTable, Mode, ModelDims, ModelKind, NnArchitecture,
    NnParameters, ParamSet,
};
use crate::util::{derive_rng, derive_seed};

/// Rows per forward/backward shard. Shards are reduced in index order, so
/// results do not depend on the number of threads.
pub const SHARD_ROWS: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub lambda_l2: f64,
    pub base_lr: f64,
    pub max_lr: f64,
    /// Half-period of the learning-rate triangle; `None` means two epochs.
    pub step_size: Option<u64>,
    pub patience: usize,
    pub max_epochs: usize,
    pub class_weighting: bool,
    pub adam: AdamConfig,
    pub clamp_eps: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 1024,
            lambda_l2: 1e-5,
            base_lr: 1e-3,
            max_lr: 6e-3,
            step_size: None,
            patience: 5,
            max_epochs: 50,
            class_weighting: true,
            adam: AdamConfig::default(),
            clamp_eps: 1e-7,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    /// Constants for data sets of roughly a million admissions.
    pub fn full_scale() -> Self {
        TrainingConfig { batch_size: 16_384, step_size: Some(1000), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr <= self.max_lr && self.max_lr.is_finite()) {
            return fail(format!("need 0 < base_lr <= max_lr, got {} and {}", self.base_lr, self.max_lr));
        }
        if self.patience == 0 {
            return fail("patience must be at least 1".into());
        }
        if !(self.lambda_l2 >= 0.0 && self.lambda_l2.is_finite()) {
            return fail(format!("lambda_l2 must be non-negative, got {}", self.lambda_l2));
        }
        if self.step_size == Some(0) {
            return fail("step_size must be positive".into());
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return fail(format!("clamp_eps must lie in (0, 0.5), got {}", self.clamp_eps));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return fail("adam needs beta1, beta2 in [0, 1) and eps > 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

/// One line of the training log. Losses are per-record means of the
/// penalized objective; epoch 0 is the initialized model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub iterations: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Learning rate of every optimizer step.
    pub lr_trace: Vec<f64>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
    pub class_weights: ClassWeights,
    pub step_size: u64,
}

impl TrainLog {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("plain record"));
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: NnParameters,
    pub log: TrainLog,
}

/// Summed penalized loss and gradient over `batch`, sharded.
pub fn loss_and_grad(
    params: &NnParameters,
    batch: &BatchTensor,
    weights: ClassWeights,
    lambda: f64,
    clamp_eps: f64,
    mode: Mode,
    dropout_seed: u64,
) -> Result<(f64, NnParameters)> {
    let shards: Vec<(usize, usize)> = (0..batch.n)
        .step_by(SHARD_ROWS)
        .map(|s| (s, (s + SHARD_ROWS).min(batch.n)))
        .collect();
    let parts: Vec<Result<(f64, NnParameters)>> = shards
        .par_iter()
        .enumerate()
        .map(|(k, &(s, e))| {
            let shard = batch.rows(s, e);
            let (probs, cache) = forward(params, &shard, mode, derive_seed(dropout_seed, &[k as u64]))?;
            let (bce, d_logits) = weighted_bce(&probs, &shard.outcome, weights, clamp_eps)?;
            let grads = backward(params, &shard, &cache, &d_logits)?;
            Ok((bce, grads))
        })
        .collect();
    let mut total = l2_penalty(&params.alpha, lambda);
    let mut acc = params.zeros_like();
    for part in parts {
        let (bce, g) = part?;
        total += bce;
        for (a, b) in acc.tensors_mut().into_iter().zip(g.tensors()) {
            a.data.iter_mut().zip(b.data).for_each(|(x, y)| *x += y);
        }
    }
    for (g, &a) in acc.alpha.iter_mut().zip(&params.alpha) {
        *g += 2.0 * lambda * a;
    }
    Ok((total, acc))
}

/// Eval-mode probabilities for the given records.
pub fn predict(params: &NnParameters, dataset: &Dataset, indices: &[usize]) -> Result<Vec<f64>> {
    let parts: Vec<Result<Vec<f64>>> = indices
        .par_chunks(SHARD_ROWS * 4)
        .map(|chunk| {
            let batch = BatchTensor::gather(dataset, chunk);
            forward(params, &batch, Mode::Eval, 0).map(|r| r.0)
        })
        .collect();
    let mut out = Vec::with_capacity(indices.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Per-record mean of the penalized objective in eval mode.
pub fn mean_loss(
    params: &NnParameters,
    dataset: &Dataset,
    indices: &[usize],
    weights: ClassWeights,
    config: &TrainingConfig,
) -> Result<f64> {
    let probs = predict(params, dataset, indices)?;
    let y: Vec<f64> = indices.iter().map(|&i| dataset.records[i].outcome as f64).collect();
    let (bce, _) = weighted_bce(&probs, &y, weights, config.clamp_eps)?;
    Ok((bce + l2_penalty(&params.alpha, config.lambda_l2)) / indices.len().max(1) as f64)
}

pub fn model_dims(dataset: &Dataset) -> ModelDims {
    ModelDims {
        vocab_size: dataset.vocab_size,
        hospitals: dataset.hospitals,
        sociodem_dim: dataset.sociodem_dim,
    }
}

fn as_divergence(epoch: usize, err: Error) -> Error {
    match err {
        Error::Numerical { location, message } => Error::Divergence { epoch, message: format!("{location}: {message}") },
        other => other,
    }
}

/// Mini-batch training with early stopping on validation loss. Returns the
/// parameters of the best validation epoch.
pub fn train(
    kind: ModelKind,
    dataset: &Dataset,
    split: &SplitAssignment,
    arch: &NnArchitecture,
    config: &TrainingConfig,
    pretrained: Option<&EmbeddingTable>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if split.labels.len() != dataset.len() {
        return Err(Error::Shape(format!(
            "split has {} labels for {} records",
            split.labels.len(),
            dataset.len()
        )));
    }
    let train_idx = split.indices(SplitPart::Train);
    let val_idx = split.indices(SplitPart::Validation);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::InvalidInput("training needs nonempty train and validation parts".into()));
    }
    let train_y = dataset.outcomes(&train_idx);
    let weights = if config.class_weighting { class_weights(&train_y)? } else { ClassWeights::UNIT };
    let base_rate = train_y.iter().map(|&y| y as f64).sum::<f64>() / train_y.len() as f64;
    let mut params = NnParameters::init(kind, arch, model_dims(dataset), base_rate, pretrained, config.seed)?;
    let iters_per_epoch = train_idx.len().div_ceil(config.batch_size) as u64;
    let step_size = config.step_size.unwrap_or(2 * iters_per_epoch);
    let mut state = OptimizerState::new(&params);
    let mut stopper = EarlyStopping::new(config.patience);

    let evaluate = |p: &NnParameters, epoch: usize| -> Result<(f64, f64)> {
        let tl = mean_loss(p, dataset, &train_idx, weights, config).map_err(|e| as_divergence(epoch, e))?;
        let vl = mean_loss(p, dataset, &val_idx, weights, config).map_err(|e| as_divergence(epoch, e))?;
        if !vl.is_finite() {
            return Err(Error::Divergence { epoch, message: format!("validation loss {vl}") });
        }
        Ok((tl, vl))
    };

    let (tl, vl) = evaluate(&params, 0)?;
    let mut epochs = vec![EpochRecord { epoch: 0, train_loss: tl, val_loss: vl, lr: config.base_lr, iterations: 0 }];
    stopper.observe(0, vl);
    let mut best = params.clone();
    let mut lr_trace = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let mut t: u64 = 0;

    for epoch in 1..=config.max_epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut derive_rng(config.seed, &[0x5EED, epoch as u64]));
        let mut lr = config.base_lr;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            lr = cyclical_lr(t, config.base_lr, config.max_lr, step_size)?;
            let batch = BatchTensor::gather(dataset, chunk);
            let seed = derive_seed(config.seed, &[0xD407, epoch as u64, step as u64]);
            let (_, grads) = loss_and_grad(&params, &batch, weights, config.lambda_l2, config.clamp_eps, Mode::Train, seed)
                .map_err(|e| as_divergence(epoch, e))?;
            adam_step(&mut params, &grads, &mut state, lr, &config.adam).map_err(|e| as_divergence(epoch, e))?;
            lr_trace.push(lr);
            t += 1;
        }
        let (tl, vl) = evaluate(&params, epoch)?;
        debug!("epoch {epoch}: train {tl:.6} validation {vl:.6} lr {lr:.2e}");
        epochs.push(EpochRecord { epoch, train_loss: tl, val_loss: vl, lr, iterations: t });
        let stop = stopper.observe(epoch, vl);
        if stopper.is_best(epoch) {
            best = params.clone();
        }
        if stop {
            stop_reason = StopReason::Patience;
            break;
        }
    }
    let (best_epoch, best_loss) = stopper.best().expect("epoch 0 observed");
    info!("{kind:?}: best epoch {best_epoch} validation loss {best_loss:.6} ({stop_reason:?})");
    Ok(TrainOutcome {
        params: best,
        log: TrainLog { epochs, lr_trace, best_epoch, stop_reason, class_weights: weights, step_size },
    })
}
