//! Run manifest: everything needed to repeat a training run.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use colidr::spritegen::io::{Manifest, MANIFEST_FILE};
use colidr::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

/// Named substreams derived from the run seed.
pub const SUBSTREAMS: [&str; 5] = ["data", "init", "noise", "shuffle", "intervention"];

pub fn version() -> String {
    format!("{}-{}", env!("CARGO_PKG_VERSION"), env!("COLIDR_GIT_DESCRIBE"))
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRef {
    pub dir: PathBuf,
    pub manifest_sha256: String,
    pub seed: u64,
    pub count: usize,
    pub size: usize,
    pub task: String,
}

impl DatasetRef {
    pub fn new(dir: &Path, manifest: &Manifest) -> Result<Self> {
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest_sha256: sha256_file(&dir.join(MANIFEST_FILE))?,
            seed: manifest.seed,
            count: manifest.count,
            size: manifest.size,
            task: manifest.task.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    pub dir: PathBuf,
    pub checkpoints: Vec<String>,
    pub metrics: String,
    pub timings: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub substreams: Vec<String>,
    /// The configuration as requested.
    pub config: TrainConfig,
    /// `config` with the ablation's overrides applied; this is what trains.
    pub effective: TrainConfig,
    pub dataset: DatasetRef,
    pub outputs: Outputs,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub final_checkpoint_sha256: Option<String>,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RUN_MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
    }
}
