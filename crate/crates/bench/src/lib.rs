//! Fixtures shared by the benchmarks.

use riskadj_core::data::{standardize, Dataset};
use riskadj_core::nn::{BatchTensor, ModelDims, ModelKind, NnArchitecture, NnParameters};
use riskadj_core::synthgen::{generate, GeneratorConfig};

/// Standardized synthetic dataset with `hospitals` hospitals of 100 to 200 admissions.
pub fn dataset(hospitals: usize) -> Dataset {
    let config = GeneratorConfig { hospitals, min_admissions: 100, max_admissions: 200, ..Default::default() };
    let raw = generate(&config).expect("valid generator config").0;
    standardize(&raw, None).expect("finite features").0
}

/// Default-architecture network and the first `rows` records as a batch.
pub fn network_batch(dataset: &Dataset, rows: usize) -> (NnParameters, BatchTensor) {
    let dims = ModelDims { vocab_size: dataset.vocab_size, hospitals: dataset.hospitals, sociodem_dim: dataset.sociodem_dim };
    let arch = NnArchitecture::default();
    let params = NnParameters::init(ModelKind::Proposed, &arch, dims, 0.13, dataset.pretrained_embeddings.as_ref(), 0)
        .expect("valid architecture");
    let idx: Vec<usize> = (0..rows.min(dataset.len())).collect();
    (params, BatchTensor::gather(dataset, &idx))
}
