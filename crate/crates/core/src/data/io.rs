//! Canonical CSV + JSON sidecar dataset format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AdmissionRecord, Cohort, Dataset, DiagnosisCode};
use crate::error::{Error, Result};
use crate::nn::EmbeddingTable;
use crate::synthgen::SyntheticGroundTruth;

const COLUMNS: [&str; 8] = [
    "admission_id",
    "hospital",
    "primary",
    "secondaries",
    "age",
    "gender",
    "cohort",
    "outcome",
];

/// Contents of `<name>.meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    #[serde(rename = "K")]
    pub hospitals: usize,
    pub vocab_size: usize,
    #[serde(rename = "M")]
    pub sociodem_dim: usize,
    pub n_categories: usize,
    pub max_secondaries: usize,
    pub category_map: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<SyntheticGroundTruth>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained_embeddings: Option<EmbeddingTable>,
}

/// Sidecar path for a dataset CSV: `dir/name.csv` maps to `dir/name.meta.json`.
pub fn meta_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    if dataset.sociodem_dim != 2 {
        return Err(Error::InvalidInput(format!(
            "canonical format stores (age, gender); dataset has M = {}",
            dataset.sociodem_dim
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(COLUMNS).map_err(csv_err)?;
    for r in &dataset.records {
        if r.sociodem.len() != 2 {
            return Err(Error::InvalidInput(format!(
                "admission {} has {} socio-demographic values",
                r.admission_id,
                r.sociodem.len()
            )));
        }
        let secondaries = r
            .secondaries
            .iter()
            .map(|c| c.0.to_string())
            .collect::<Vec<_>>()
            .join(";");
        w.write_record([
            r.admission_id.to_string(),
            r.hospital.to_string(),
            r.primary.0.to_string(),
            secondaries,
            r.sociodem[0].to_string(),
            r.sociodem[1].to_string(),
            r.cohort.as_str().to_string(),
            r.outcome.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;

    let meta = DatasetMeta {
        hospitals: dataset.hospitals,
        vocab_size: dataset.vocab_size,
        sociodem_dim: dataset.sociodem_dim,
        n_categories: dataset.n_categories,
        max_secondaries: dataset.max_secondaries,
        category_map: dataset.category_map.clone(),
        ground_truth: dataset.ground_truth.clone(),
        pretrained_embeddings: dataset.pretrained_embeddings.clone(),
    };
    let mpath = meta_path(path);
    let file = File::create(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut bw = BufWriter::new(file);
    serde_json::to_writer(&mut bw, &meta)?;
    bw.write_all(b"\n").map_err(|e| Error::io(&mpath, e))?;
    bw.flush().map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

fn parse_field<T: std::str::FromStr>(value: &str, column: &str, line: u64) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| Error::Parse {
        line,
        message: format!("column '{column}': cannot parse '{value}': {e}"),
    })
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mpath = meta_path(path);
    let meta_file = File::open(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let meta: DatasetMeta = serde_json::from_reader(BufReader::new(meta_file))?;

    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(BufReader::new(file));
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let mut positions = [usize::MAX; COLUMNS.len()];
    for (i, h) in headers.iter().enumerate() {
        let slot = COLUMNS.iter().position(|c| *c == h).ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("unknown column '{h}'"),
        })?;
        if positions[slot] != usize::MAX {
            return Err(Error::Parse {
                line: 1,
                message: format!("duplicate column '{h}'"),
            });
        }
        positions[slot] = i;
    }
    if let Some(missing) = positions.iter().position(|&p| p == usize::MAX) {
        return Err(Error::Parse {
            line: 1,
            message: format!("missing column '{}'", COLUMNS[missing]),
        });
    }

    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let field = |slot: usize| row.get(positions[slot]).unwrap_or("");
        let secondaries = match field(3) {
            "" => Vec::new(),
            s => s
                .split(';')
                .map(|c| parse_field::<u32>(c, "secondaries", line).map(DiagnosisCode))
                .collect::<Result<Vec<_>>>()?,
        };
        let cohort: Cohort = field(6).parse().map_err(|message| Error::Parse { line, message })?;
        records.push(AdmissionRecord {
            admission_id: parse_field(field(0), COLUMNS[0], line)?,
            hospital: parse_field(field(1), COLUMNS[1], line)?,
            primary: DiagnosisCode(parse_field(field(2), COLUMNS[2], line)?),
            secondaries,
            sociodem: vec![
                parse_field(field(4), COLUMNS[4], line)?,
                parse_field(field(5), COLUMNS[5], line)?,
            ],
            outcome: parse_field(field(7), COLUMNS[7], line)?,
            cohort,
        });
    }

    Ok(Dataset {
        records,
        hospitals: meta.hospitals,
        vocab_size: meta.vocab_size,
        sociodem_dim: meta.sociodem_dim,
        n_categories: meta.n_categories,
        category_map: meta.category_map,
        max_secondaries: meta.max_secondaries,
        ground_truth: meta.ground_truth,
        pretrained_embeddings: meta.pretrained_embeddings,
    })
}
