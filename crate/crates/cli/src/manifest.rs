use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;

use riskadj_core::data::meta_path;
use riskadj_core::util::sha256_hex;

use crate::config::CONFIG_SCHEMA_VERSION;

#[derive(Clone, Debug, Serialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Record of one invocation. Everything except the two timestamps is a
/// function of the inputs and the seed.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub tool_version: String,
    pub config_schema: u32,
    pub config_hash: Option<String>,
    pub dataset_hash: Option<String>,
    pub seed: u64,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub outputs: Vec<OutputFile>,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

/// Collects outputs while a command runs and writes the manifest last.
pub struct Run {
    command: String,
    seed: u64,
    started: u128,
    pub config_hash: Option<String>,
    pub dataset_hash: Option<String>,
    outputs: Vec<PathBuf>,
}

impl Run {
    pub fn start(command: &str, seed: u64) -> Self {
        Run { command: command.into(), seed, started: now_ms(), config_hash: None, dataset_hash: None, outputs: Vec::new() }
    }

    pub fn write(&mut self, path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
        std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.record(path);
        Ok(())
    }

    /// Registers a file written elsewhere.
    pub fn record(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn finish(self, manifest: &Path) -> Result<RunManifest> {
        let base = manifest.parent().unwrap_or(Path::new(""));
        let mut outputs = Vec::new();
        for p in &self.outputs {
            let bytes = std::fs::read(p).with_context(|| format!("output {} is missing", p.display()))?;
            let shown = p.strip_prefix(base).unwrap_or(p);
            outputs.push(OutputFile { path: shown.display().to_string(), sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 });
        }
        let m = RunManifest {
            command: self.command,
            args: std::env::args().skip(1).collect(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config_schema: CONFIG_SCHEMA_VERSION,
            config_hash: self.config_hash,
            dataset_hash: self.dataset_hash,
            seed: self.seed,
            started_unix_ms: self.started,
            finished_unix_ms: now_ms(),
            outputs,
        };
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes") + "\n";
        std::fs::write(manifest, text).with_context(|| format!("writing {}", manifest.display()))?;
        Ok(m)
    }
}

/// Hash over a dataset CSV and its sidecar.
pub fn dataset_hash(csv: &Path) -> Result<String> {
    let mut bytes = std::fs::read(csv).with_context(|| format!("reading {}", csv.display()))?;
    let meta = meta_path(csv);
    bytes.extend(std::fs::read(&meta).with_context(|| format!("reading {}", meta.display()))?);
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lists_existing_outputs_relative_to_its_dir() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = Run::start("unit", 9);
        run.write(&dir.path().join("a.txt"), "abc").unwrap();
        let m = run.finish(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(m.outputs.len(), 1);
        assert_eq!(m.outputs[0].path, "a.txt");
        assert_eq!(m.outputs[0].bytes, 3);
        assert_eq!(m.outputs[0].sha256, sha256_hex(b"abc"));
        assert!(dir.path().join("manifest.json").exists());
    }

    #[test]
    fn missing_output_fails_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = Run::start("unit", 0);
        run.record(&dir.path().join("never-written"));
        assert!(run.finish(&dir.path().join("manifest.json")).is_err());
    }
}
