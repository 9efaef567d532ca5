//! `run_manifest.json`: everything needed to rerun a command bit-exactly,
//! plus hashes of what it wrote.

use std::path::{Path, PathBuf};

use cellsym_core::io_util::atomic_write;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    /// Input paths as given on the command line, keyed by flag.
    pub inputs: Vec<(String, String)>,
    pub dataset_checksum: Option<String>,
    pub artifacts: Vec<Artifact>,
    pub wall_clock_seconds: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash over every regular file of a directory except run manifests, in
/// name order, covering names and contents.
pub fn directory_checksum(dir: &Path) -> Result<String, CliError> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::data(dir.display(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != MANIFEST_FILE))
        .collect();
    names.sort();
    let mut h = Sha256::new();
    for p in names {
        let bytes = std::fs::read(&p).map_err(|e| CliError::data(p.display(), e))?;
        h.update(p.file_name().unwrap().to_string_lossy().as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Describes files under `root` (given relative to it) for the manifest.
pub fn artifacts(root: &Path, rel_paths: &[String]) -> Result<Vec<Artifact>, CliError> {
    rel_paths
        .iter()
        .map(|rel| {
            let bytes = std::fs::read(root.join(rel)).map_err(|e| CliError::data(rel, e))?;
            Ok(Artifact {
                path: rel.clone(),
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            })
        })
        .collect()
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| CliError::data("run manifest", e))?;
        atomic_write(&dir.join(MANIFEST_FILE), &json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let p = dir.join(MANIFEST_FILE);
        let bytes = std::fs::read(&p).map_err(|e| CliError::data(p.display(), e))?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::data(p.display(), e))
    }
}
