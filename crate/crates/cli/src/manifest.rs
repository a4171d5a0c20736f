use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sitgen::binfmt::content_hash;

pub const MANIFEST_DIR: &str = "manifests";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: PathBuf,
    pub sha256: String,
}

/// Provenance of one command run: enough to rerun it and to check that
/// the rerun produced the same bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, OutputFile>,
    pub model_hashes: BTreeMap<String, String>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    pub started_at: String,
    pub wall_clock_secs: f64,
    pub version: String,
}

pub struct Recorder {
    manifest: RunManifest,
    start: Instant,
}

impl Recorder {
    pub fn new(command: &str, config: serde_json::Value, seeds: Vec<u64>) -> Self {
        Recorder {
            manifest: RunManifest {
                command: command.to_string(),
                argv: std::env::args().collect(),
                config,
                seeds,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                model_hashes: BTreeMap::new(),
                metrics: BTreeMap::new(),
                started_at: chrono::Local::now().to_rfc3339(),
                wall_clock_secs: 0.0,
                version: env!("CARGO_PKG_VERSION").to_string(),
            },
            start: Instant::now(),
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.manifest.inputs.insert(name.to_string(), path.to_path_buf());
    }

    /// Records an output file with the hash of its current contents.
    pub fn output(&mut self, name: &str, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("reading back {}", path.display()))?;
        self.manifest.outputs.insert(
            name.to_string(),
            OutputFile {
                path: path.to_path_buf(),
                sha256: content_hash(&bytes),
            },
        );
        Ok(())
    }

    pub fn model(&mut self, name: &str, hash: String) {
        self.manifest.model_hashes.insert(name.to_string(), hash);
    }

    pub fn metric(&mut self, name: &str, value: f64) {
        self.manifest.metrics.insert(name.to_string(), value);
    }

    /// Writes `<data_dir>/manifests/<command>.json`.
    pub fn finish(mut self, data_dir: &Path) -> Result<PathBuf> {
        self.manifest.wall_clock_secs = self.start.elapsed().as_secs_f64();
        let dir = data_dir.join(MANIFEST_DIR);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(format!("{}.json", self.manifest.command));
        std::fs::write(&path, serde_json::to_vec_pretty(&self.manifest)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
