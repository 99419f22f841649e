use crate::data::{AdmissionRecord, Dataset};

/// Padding marker in the secondary-code matrix. Never dereferenced.
pub const PAD: u32 = u32::MAX;

/// Mini-batch in network layout: secondaries are padded to the longest set.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTensor {
    pub n: usize,
    pub max_len: usize,
    /// `n x max_len`, padded with [`PAD`].
    pub secondaries: Vec<u32>,
    pub lengths: Vec<usize>,
    pub primary: Vec<u32>,
    pub sociodem_dim: usize,
    /// `n x sociodem_dim`.
    pub sociodem: Vec<f64>,
    pub hospital: Vec<usize>,
    pub outcome: Vec<f64>,
}

impl BatchTensor {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a AdmissionRecord>, sociodem_dim: usize) -> Self {
        let rows: Vec<&AdmissionRecord> = records.into_iter().collect();
        let n = rows.len();
        let max_len = rows.iter().map(|r| r.secondaries.len()).max().unwrap_or(0);
        let mut secondaries = vec![PAD; n * max_len];
        let mut lengths = Vec::with_capacity(n);
        let mut primary = Vec::with_capacity(n);
        let mut sociodem = Vec::with_capacity(n * sociodem_dim);
        let mut hospital = Vec::with_capacity(n);
        let mut outcome = Vec::with_capacity(n);
        for (i, r) in rows.iter().enumerate() {
            for (j, c) in r.secondaries.iter().enumerate() {
                secondaries[i * max_len + j] = c.0;
            }
            lengths.push(r.secondaries.len());
            primary.push(r.primary.0);
            let mut z = r.sociodem.clone();
            z.resize(sociodem_dim, f64::NAN);
            sociodem.extend(z);
            hospital.push(r.hospital);
            outcome.push(r.outcome as f64);
        }
        BatchTensor {
            n,
            max_len,
            secondaries,
            lengths,
            primary,
            sociodem_dim,
            sociodem,
            hospital,
            outcome,
        }
    }

    pub fn gather(dataset: &Dataset, indices: &[usize]) -> Self {
        Self::from_records(indices.iter().map(|&i| &dataset.records[i]), dataset.sociodem_dim)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Valid secondary codes of row `i`.
    pub fn secondaries_of(&self, i: usize) -> &[u32] {
        &self.secondaries[i * self.max_len..i * self.max_len + self.lengths[i]]
    }

    pub fn sociodem_of(&self, i: usize) -> &[f64] {
        &self.sociodem[i * self.sociodem_dim..(i + 1) * self.sociodem_dim]
    }

    /// Copy of rows `start..end`.
    pub fn rows(&self, start: usize, end: usize) -> BatchTensor {
        let max_len = self.lengths[start..end].iter().copied().max().unwrap_or(0);
        let mut secondaries = vec![PAD; (end - start) * max_len];
        for (out, i) in (start..end).enumerate() {
            let src = self.secondaries_of(i);
            secondaries[out * max_len..out * max_len + src.len()].copy_from_slice(src);
        }
        BatchTensor {
            n: end - start,
            max_len,
            secondaries,
            lengths: self.lengths[start..end].to_vec(),
            primary: self.primary[start..end].to_vec(),
            sociodem_dim: self.sociodem_dim,
            sociodem: self.sociodem[start * self.sociodem_dim..end * self.sociodem_dim].to_vec(),
            hospital: self.hospital[start..end].to_vec(),
            outcome: self.outcome[start..end].to_vec(),
        }
    }
}
