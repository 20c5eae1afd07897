use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use crate::error::Result;
use crate::io::write_atomic;

/// A file written by a run, relative to the run directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

impl FileEntry {
    pub fn new(path: &str, contents: &[u8]) -> Self {
        Self {
            path: path.to_string(),
            bytes: contents.len() as u64,
            sha256: hex::encode(Sha256::digest(contents)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageError {
    pub stage: String,
    pub message: String,
}

/// Outcome of one (cell, seed) chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: String,
    pub seed: u64,
    pub irr: bool,
    pub flf: bool,
    pub dsg: bool,
    pub output_sha256: String,
    /// Whether the output is bit-identical to the unguided chain of the
    /// same seed.
    pub matches_unguided: bool,
    /// Mean `|x - z_traj|` over observed cells.
    pub deviation_guidance: Option<f64>,
    /// Mean `|x - truth|` over observed cells.
    pub deviation_truth: Option<f64>,
    /// Mean `|x - truth|` over unobserved cells.
    pub deviation_truth_unobserved: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryResult {
    pub ate: f64,
    pub rpe_t: f64,
    pub rpe_r_deg: f64,
    pub scale: f64,
    pub aligned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub config: ExperimentConfig,
    pub latent_shape: Option<[usize; 4]>,
    pub mask_coverage: Option<f64>,
    pub files: Vec<FileEntry>,
    pub cells: Vec<CellResult>,
    pub trajectory: Option<TrajectoryResult>,
    pub errors: Vec<StageError>,
    /// Excluded from [`RunManifest::content_hash`].
    pub wall_clock_s: f64,
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            config_hash: config.hash()?,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            latent_shape: None,
            mask_coverage: None,
            files: Vec::new(),
            cells: Vec::new(),
            trajectory: None,
            errors: Vec::new(),
            wall_clock_s: 0.0,
        })
    }

    pub fn succeeded(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn record_error(&mut self, stage: &str, err: impl std::fmt::Display) {
        log::error!("stage {stage} failed: {err}");
        self.errors.push(StageError {
            stage: stage.to_string(),
            message: err.to_string(),
        });
    }

    /// SHA-256 over everything but wall-clock time and the output location.
    pub fn content_hash(&self) -> Result<String> {
        let mut m = self.clone();
        m.wall_clock_s = 0.0;
        m.config.output_dir = Default::default();
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&m)?)))
    }

    pub fn cell(&self, label: &str, seed: u64) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.cell == label && c.seed == seed)
    }

    /// Writes `manifest/manifest.json` under `run_dir`, with the content hash
    /// alongside.
    pub fn write(&self, run_dir: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Stored<'a> {
            content_hash: String,
            #[serde(flatten)]
            manifest: &'a RunManifest,
        }
        let stored = Stored {
            content_hash: self.content_hash()?,
            manifest: self,
        };
        write_atomic(&run_dir.join("manifest").join("manifest.json"), &serde_json::to_vec_pretty(&stored)?)
    }

    pub fn read(run_dir: &Path) -> Result<Self> {
        let text = std::fs::read(run_dir.join("manifest").join("manifest.json"))?;
        let mut value: serde_json::Value = serde_json::from_slice(&text)?;
        if let Some(map) = value.as_object_mut() {
            map.remove("content_hash");
        }
        Ok(serde_json::from_value(value)?)
    }
}
