//! Run manifests: the fully resolved configuration plus SHA-256 hashes of
//! every artifact the run produced. Re-running with the manifest as the
//! config file reproduces those artifacts bit for bit.

use dca_core::error::Result;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    /// Relative artifact path -> hex SHA-256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{:02x}", b)).collect()
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: BTreeMap<String, String>) -> Self {
        Manifest { command: command.to_string(), seed, config, artifacts: BTreeMap::new() }
    }

    /// Hash a produced file and record it under its run-relative path.
    pub fn record(&mut self, run_dir: &Path, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        let rel = path
            .strip_prefix(run_dir)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/");
        self.artifacts.insert(rel, sha256_hex(&bytes));
        Ok(())
    }

    pub fn write(&self, run_dir: &Path) -> Result<()> {
        let path = run_dir.join("manifest.json");
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| dca_core::DcaError::Data(format!("manifest serialize: {}", e)))?;
        std::fs::write(path, json)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_relative_paths_and_stable_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("metrics");
        std::fs::create_dir_all(&sub).unwrap();
        let file = sub.join("m.json");
        std::fs::write(&file, b"{}").unwrap();
        let mut m = Manifest::new("eval", 3, BTreeMap::new());
        m.record(dir.path(), &file).unwrap();
        let h = m.artifacts.get("metrics/m.json").unwrap();
        assert_eq!(h.len(), 64);
        let mut m2 = Manifest::new("eval", 3, BTreeMap::new());
        m2.record(dir.path(), &file).unwrap();
        assert_eq!(m.artifacts, m2.artifacts);
    }
}
