//! Partially interpretable risk model: diagnosis embeddings, permutation
//! invariant pooling, dense fusion layers and an additive linear hospital head.

mod batch;
mod network;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{derive_rng, logit};

pub use batch::BatchTensor;
pub use network::{
    backward, embed, forward, forward_fully_nonlinear, pool, ForwardCache, Mode,
};

/// Diagnosis embedding matrix, `rows x dim`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    #[serde(default = "default_true")]
    pub trainable: bool,
}

fn default_true() -> bool {
    true
}

impl EmbeddingTable {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn glorot(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (rows + dim) as f64).sqrt();
        EmbeddingTable {
            rows,
            dim,
            data: (0..rows * dim).map(|_| rng.random_range(-limit..limit)).collect(),
            trainable: true,
        }
    }
}

/// Which pooled decompositions of the secondary set feed `Lq`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(default)]
pub struct Pooling {
    pub sum: bool,
    pub min: bool,
    pub max: bool,
}

impl Default for Pooling {
    fn default() -> Self {
        Pooling {
            sum: true,
            min: true,
            max: true,
        }
    }
}

impl Pooling {
    pub fn count(&self) -> usize {
        self.sum as usize + self.min as usize + self.max as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Additive linear hospital head on top of the non-linear encoder.
    Proposed,
    /// Hospital one-hot appended to the socio-demographics; no extractable effect.
    FullyNonlinear,
}

/// Network shape. Hidden layers use rectifier activations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NnArchitecture {
    pub embedding_dim: usize,
    pub lq_layers: usize,
    pub lq_width: usize,
    pub lp_layers: usize,
    pub lp_width: usize,
    pub dropout: f64,
    pub pooling: Pooling,
}

impl Default for NnArchitecture {
    fn default() -> Self {
        NnArchitecture {
            embedding_dim: 32,
            lq_layers: 0,
            lq_width: 64,
            lp_layers: 2,
            lp_width: 64,
            dropout: 0.25,
            pooling: Pooling::default(),
        }
    }
}

impl NnArchitecture {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be >= 1".into()));
        }
        if self.lq_layers > 2 || self.lp_layers > 2 {
            return Err(Error::Config(format!(
                "layer counts must be in {{0,1,2}}, got Lq={} Lp={}",
                self.lq_layers, self.lp_layers
            )));
        }
        if self.lq_width == 0 || self.lp_width == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.pooling.count() == 0 {
            return Err(Error::Config("at least one pooling function is required".into()));
        }
        Ok(())
    }

    /// Width of `concat(primary embedding, pools)`.
    pub fn pooled_dim(&self) -> usize {
        self.embedding_dim * (1 + self.pooling.count())
    }

    pub fn lq_output_dim(&self) -> usize {
        if self.lq_layers == 0 {
            self.pooled_dim()
        } else {
            self.lq_width
        }
    }

    /// Ordering key used to break grid-search ties.
    pub fn sort_key(&self) -> (usize, usize, usize, usize, usize, u64, Pooling) {
        (
            self.embedding_dim,
            self.lq_layers,
            self.lq_width,
            self.lp_layers,
            self.lp_width,
            self.dropout.to_bits(),
            self.pooling,
        )
    }
}

/// Feature-space sizes a model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub hospitals: usize,
    pub sociodem_dim: usize,
}

/// Fully connected layer, `weight` is `outputs x inputs` row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn glorot(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        Dense {
            inputs,
            outputs,
            weight: (0..inputs * outputs)
                .map(|_| rng.random_range(-limit..limit))
                .collect(),
            bias: vec![0.0; outputs],
        }
    }

    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }
}

/// Borrowed view of one named parameter tensor.
pub struct TensorRef<'a> {
    pub name: String,
    pub data: &'a [f64],
    pub trainable: bool,
}

pub struct TensorMut<'a> {
    pub name: String,
    pub data: &'a mut [f64],
    pub trainable: bool,
}

/// A collection of named tensors with a fixed iteration order.
pub trait ParamSet {
    fn tensors(&self) -> Vec<TensorRef<'_>>;
    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>>;
    /// Called after an in-place update.
    fn mark_updated(&mut self) {}
}

/// All trainable state of the network. Gradients reuse this type.
#[derive(Clone, Debug, PartialEq)]
pub struct NnParameters {
    pub kind: ModelKind,
    pub arch: NnArchitecture,
    pub dims: ModelDims,
    pub embedding: EmbeddingTable,
    pub lq: Vec<Dense>,
    pub lp: Vec<Dense>,
    /// Final linear layer; its bias is the global bias.
    pub output: Dense,
    /// Per-hospital weights; empty for the fully non-linear variant.
    pub alpha: Vec<f64>,
    pub(crate) version: u64,
}

impl NnParameters {
    /// Initializes a network. Dense weights are Glorot-uniform, `alpha` starts
    /// at zero and the global bias at `logit(base_rate)`.
    pub fn init(
        kind: ModelKind,
        arch: &NnArchitecture,
        dims: ModelDims,
        base_rate: f64,
        pretrained: Option<&EmbeddingTable>,
        seed: u64,
    ) -> Result<Self> {
        arch.validate()?;
        let mut rng = derive_rng(seed, &[0x1417]);
        let b = arch.embedding_dim;
        let embedding = match pretrained {
            Some(t) => {
                if t.rows != dims.vocab_size || t.dim != b {
                    return Err(Error::Shape(format!(
                        "pretrained table is {}x{}, model needs {}x{}",
                        t.rows, t.dim, dims.vocab_size, b
                    )));
                }
                t.clone()
            }
            None => EmbeddingTable::glorot(dims.vocab_size, b, &mut rng),
        };
        let mut params = Self::zeros(kind, arch, dims, embedding);
        for layer in params.lq.iter_mut().chain(params.lp.iter_mut()) {
            *layer = Dense::glorot(layer.inputs, layer.outputs, &mut rng);
        }
        params.output = Dense::glorot(params.output.inputs, 1, &mut rng);
        let rate = base_rate.clamp(1e-6, 1.0 - 1e-6);
        params.output.bias[0] = logit(rate);
        Ok(params)
    }

    fn zeros(kind: ModelKind, arch: &NnArchitecture, dims: ModelDims, embedding: EmbeddingTable) -> Self {
        let extra = Self::extra_inputs(kind, dims);
        let mut lq = Vec::new();
        let mut width = arch.pooled_dim();
        for _ in 0..arch.lq_layers {
            lq.push(Dense::zeros(width, arch.lq_width));
            width = arch.lq_width;
        }
        let fusion = arch.lq_output_dim() + dims.sociodem_dim;
        let mut lp = Vec::new();
        let mut width = fusion + extra;
        for _ in 0..arch.lp_layers {
            lp.push(Dense::zeros(width, arch.lp_width));
            width = arch.lp_width;
        }
        let alpha = match kind {
            ModelKind::Proposed => vec![0.0; dims.hospitals],
            ModelKind::FullyNonlinear => Vec::new(),
        };
        NnParameters {
            kind,
            arch: arch.clone(),
            dims,
            embedding,
            lq,
            lp,
            output: Dense::zeros(width, 1),
            alpha,
            version: 0,
        }
    }

    fn extra_inputs(kind: ModelKind, dims: ModelDims) -> usize {
        match kind {
            ModelKind::Proposed => 0,
            ModelKind::FullyNonlinear => dims.hospitals,
        }
    }

    /// Width of `concat(u, z)` before any hospital one-hot columns.
    pub fn fusion_dim(&self) -> usize {
        self.arch.lq_output_dim() + self.dims.sociodem_dim
    }

    /// Same shapes, every entry zero.
    pub fn zeros_like(&self) -> Self {
        let table = EmbeddingTable {
            data: vec![0.0; self.embedding.data.len()],
            ..self.embedding.clone()
        };
        Self::zeros(self.kind, &self.arch, self.dims, table)
    }

    pub fn bias(&self) -> f64 {
        self.output.bias[0]
    }

    pub fn set_bias(&mut self, b: f64) {
        self.output.bias[0] = b;
        self.version += 1;
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> NnCheckpoint {
        NnCheckpoint {
            format: NN_CHECKPOINT_FORMAT.to_string(),
            kind: self.kind,
            arch: self.arch.clone(),
            dims: self.dims,
            config_hash: config_hash.to_string(),
            tensors: self
                .tensors()
                .into_iter()
                .zip(self.shapes())
                .map(|(t, shape)| NamedTensor {
                    name: t.name,
                    shape,
                    data: t.data.to_vec(),
                })
                .collect(),
        }
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = vec![vec![self.embedding.rows, self.embedding.dim]];
        for l in self.lq.iter().chain(&self.lp).chain(std::iter::once(&self.output)) {
            shapes.push(vec![l.outputs, l.inputs]);
            shapes.push(vec![l.outputs]);
        }
        shapes.push(vec![self.alpha.len()]);
        shapes
    }

    /// Rebuilds parameters, validating every tensor against the architecture.
    pub fn from_checkpoint(ckpt: &NnCheckpoint) -> Result<Self> {
        if ckpt.format != NN_CHECKPOINT_FORMAT {
            return Err(Error::InvalidInput(format!(
                "unsupported checkpoint format '{}'",
                ckpt.format
            )));
        }
        ckpt.arch.validate()?;
        let table = EmbeddingTable {
            rows: ckpt.dims.vocab_size,
            dim: ckpt.arch.embedding_dim,
            data: vec![0.0; ckpt.dims.vocab_size * ckpt.arch.embedding_dim],
            trainable: true,
        };
        let mut params = Self::zeros(ckpt.kind, &ckpt.arch, ckpt.dims, table);
        let shapes = params.shapes();
        let mut slots = params.tensors_mut();
        if slots.len() != ckpt.tensors.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} tensors, architecture needs {}",
                ckpt.tensors.len(),
                slots.len()
            )));
        }
        for ((slot, shape), t) in slots.iter_mut().zip(&shapes).zip(&ckpt.tensors) {
            if slot.name != t.name || *shape != t.shape || slot.data.len() != t.data.len() {
                return Err(Error::Shape(format!(
                    "tensor '{}' {:?} does not match expected '{}' {:?}",
                    t.name, t.shape, slot.name, shape
                )));
            }
            slot.data.copy_from_slice(&t.data);
        }
        Ok(params)
    }
}

impl ParamSet for NnParameters {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = vec![TensorRef {
            name: "embedding".into(),
            data: &self.embedding.data,
            trainable: self.embedding.trainable,
        }];
        for (group, layers) in [("lq", &self.lq), ("lp", &self.lp)] {
            for (i, l) in layers.iter().enumerate() {
                out.push(TensorRef { name: format!("{group}.{i}.weight"), data: &l.weight, trainable: true });
                out.push(TensorRef { name: format!("{group}.{i}.bias"), data: &l.bias, trainable: true });
            }
        }
        out.push(TensorRef { name: "output.weight".into(), data: &self.output.weight, trainable: true });
        out.push(TensorRef { name: "output.bias".into(), data: &self.output.bias, trainable: true });
        out.push(TensorRef { name: "alpha".into(), data: &self.alpha, trainable: true });
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let trainable = self.embedding.trainable;
        let mut out = vec![TensorMut {
            name: "embedding".into(),
            data: &mut self.embedding.data,
            trainable,
        }];
        for (group, layers) in [("lq", &mut self.lq), ("lp", &mut self.lp)] {
            for (i, l) in layers.iter_mut().enumerate() {
                out.push(TensorMut { name: format!("{group}.{i}.weight"), data: &mut l.weight, trainable: true });
                out.push(TensorMut { name: format!("{group}.{i}.bias"), data: &mut l.bias, trainable: true });
            }
        }
        out.push(TensorMut { name: "output.weight".into(), data: &mut self.output.weight, trainable: true });
        out.push(TensorMut { name: "output.bias".into(), data: &mut self.output.bias, trainable: true });
        out.push(TensorMut { name: "alpha".into(), data: &mut self.alpha, trainable: true });
        out
    }

    fn mark_updated(&mut self) {
        self.version += 1;
    }
}

pub const NN_CHECKPOINT_FORMAT: &str = "riskadj-nn/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Serialized network: architecture block, named tensors and the hash of the
/// training configuration that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NnCheckpoint {
    pub format: String,
    pub kind: ModelKind,
    pub arch: NnArchitecture,
    pub dims: ModelDims,
    pub config_hash: String,
    pub tensors: Vec<NamedTensor>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims { vocab_size: 20, hospitals: 4, sociodem_dim: 2 }
    }

    #[test]
    fn shapes_follow_architecture() {
        let arch = NnArchitecture { embedding_dim: 4, lq_layers: 1, lq_width: 6, lp_layers: 2, lp_width: 5, ..Default::default() };
        let p = NnParameters::init(ModelKind::Proposed, &arch, dims(), 0.13, None, 1).unwrap();
        assert_eq!(p.lq[0].inputs, 16);
        assert_eq!(p.lp[0].inputs, 6 + 2);
        assert_eq!(p.output.inputs, 5);
        assert_eq!(p.alpha, vec![0.0; 4]);
        assert!((p.bias() - logit(0.13)).abs() < 1e-15);

        let arch0 = NnArchitecture { embedding_dim: 3, lq_layers: 0, lp_layers: 0, ..Default::default() };
        let f = NnParameters::init(ModelKind::FullyNonlinear, &arch0, dims(), 0.5, None, 1).unwrap();
        assert!(f.alpha.is_empty());
        assert_eq!(f.output.inputs, 12 + 2 + 4);
    }

    #[test]
    fn architecture_validation() {
        let bad = [
            NnArchitecture { lq_layers: 3, ..Default::default() },
            NnArchitecture { lp_width: 0, ..Default::default() },
            NnArchitecture { dropout: 1.0, ..Default::default() },
            NnArchitecture { embedding_dim: 0, ..Default::default() },
            NnArchitecture { pooling: Pooling { sum: false, min: false, max: false }, ..Default::default() },
        ];
        for a in bad {
            assert!(a.validate().is_err(), "{a:?}");
        }
        assert!(NnArchitecture::default().validate().is_ok());
    }

    #[test]
    fn pretrained_table_shape_is_checked() {
        let table = EmbeddingTable { rows: 20, dim: 3, data: vec![0.5; 60], trainable: true };
        let arch = NnArchitecture { embedding_dim: 3, ..Default::default() };
        let p = NnParameters::init(ModelKind::Proposed, &arch, dims(), 0.2, Some(&table), 0).unwrap();
        assert_eq!(p.embedding, table);
        let arch = NnArchitecture { embedding_dim: 4, ..Default::default() };
        assert!(NnParameters::init(ModelKind::Proposed, &arch, dims(), 0.2, Some(&table), 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_shape_validation() {
        let arch = NnArchitecture { embedding_dim: 4, lq_layers: 1, lq_width: 3, lp_layers: 1, lp_width: 2, ..Default::default() };
        let p = NnParameters::init(ModelKind::Proposed, &arch, dims(), 0.1, None, 9).unwrap();
        let ckpt = p.to_checkpoint("abc");
        let json = serde_json::to_string(&ckpt).unwrap();
        let back: NnCheckpoint = serde_json::from_str(&json).unwrap();
        let q = NnParameters::from_checkpoint(&back).unwrap();
        assert_eq!(p.tensors().len(), q.tensors().len());
        for (a, b) in p.tensors().iter().zip(q.tensors()) {
            assert_eq!(a.data, b.data);
        }
        let mut broken = ckpt.clone();
        broken.tensors[1].data.pop();
        assert!(matches!(NnParameters::from_checkpoint(&broken), Err(Error::Shape(_))));
        let mut wrong_arch = ckpt;
        wrong_arch.arch.lp_width = 7;
        assert!(NnParameters::from_checkpoint(&wrong_arch).is_err());
    }
}
