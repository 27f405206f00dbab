//! Run manifests: enough provenance to reproduce any command.
//!
//! A manifest is written as JSON before long-running work starts and
//! records the command line, the full configuration snapshot, all seeds,
//! SHA-256 hashes of every input file, the tool version, and timestamps.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest io error for {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest parse error for {path}: {source}")]
    Parse {
        path: std::path::PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Subcommand plus the arguments it was invoked with.
    pub command: Vec<String>,
    /// Full configuration snapshot as `key = value` text or JSON.
    pub config_snapshot: String,
    /// Every seed the run depends on, by name.
    pub seeds: BTreeMap<String, u64>,
    /// SHA-256 of every input file, keyed by relative path.
    pub input_hashes: BTreeMap<String, String>,
    pub tool_version: String,
    pub started_at: String,
}

impl RunManifest {
    pub fn new(command: Vec<String>, config_snapshot: String) -> Self {
        RunManifest {
            command,
            config_snapshot,
            seeds: BTreeMap::new(),
            input_hashes: BTreeMap::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: chrono::Utc::now().to_rfc3339(),
        }
    }

    pub fn with_seed(mut self, name: &str, seed: u64) -> Self {
        self.seeds.insert(name.to_string(), seed);
        self
    }

    /// Hash one input file and record it under its display path.
    pub fn hash_input(&mut self, path: &Path) -> Result<(), ManifestError> {
        let digest = sha256_file(path)?;
        self.input_hashes.insert(path.display().to_string(), digest);
        Ok(())
    }

    /// Hash every regular file under a directory (sorted, recursive).
    pub fn hash_input_dir(&mut self, dir: &Path) -> Result<(), ManifestError> {
        for file in sorted_files(dir)? {
            let digest = sha256_file(&file)?;
            self.input_hashes.insert(file.display().to_string(), digest);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ManifestError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Hex SHA-256 of one file's contents.
pub fn sha256_file(path: &Path) -> Result<String, ManifestError> {
    let bytes = std::fs::read(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hex SHA-256 over a directory: each file's relative path and contents,
/// in sorted path order, folded into one digest.
pub fn sha256_dir(dir: &Path) -> Result<String, ManifestError> {
    let mut hasher = Sha256::new();
    for file in sorted_files(dir)? {
        let rel = file.strip_prefix(dir).unwrap_or(&file);
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0u8]);
        let bytes = std::fs::read(&file).map_err(|source| ManifestError::Io {
            path: file.clone(),
            source,
        })?;
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn sorted_files(dir: &Path) -> Result<Vec<std::path::PathBuf>, ManifestError> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(current) = stack.pop() {
        let entries = std::fs::read_dir(&current).map_err(|source| ManifestError::Io {
            path: current.clone(),
            source,
        })?;
        for entry in entries {
            let entry = entry.map_err(|source| ManifestError::Io {
                path: current.clone(),
                source,
            })?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_matches_known_vector() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.txt");
        std::fs::write(&path, b"abc").unwrap();
        assert_eq!(
            sha256_file(&path).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn dir_hash_is_order_independent_and_content_sensitive() {
        let a = tempfile::tempdir().unwrap();
        std::fs::write(a.path().join("b.bin"), b"22").unwrap();
        std::fs::write(a.path().join("a.bin"), b"11").unwrap();
        let b = tempfile::tempdir().unwrap();
        std::fs::write(b.path().join("a.bin"), b"11").unwrap();
        std::fs::write(b.path().join("b.bin"), b"22").unwrap();
        assert_eq!(sha256_dir(a.path()).unwrap(), sha256_dir(b.path()).unwrap());

        std::fs::write(b.path().join("b.bin"), b"23").unwrap();
        assert_ne!(sha256_dir(a.path()).unwrap(), sha256_dir(b.path()).unwrap());
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("config.txt");
        std::fs::write(&input, "loss.margin = 0.5\n").unwrap();
        let mut m = RunManifest::new(
            vec!["train".into(), "--out".into(), "ckpt".into()],
            "loss.margin = 0.5".into(),
        )
        .with_seed("optim", 42);
        m.hash_input(&input).unwrap();
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let loaded = RunManifest::load(&path).unwrap();
        assert_eq!(loaded, m);
        assert_eq!(loaded.seeds["optim"], 42);
        assert_eq!(loaded.input_hashes.len(), 1);
    }
}
