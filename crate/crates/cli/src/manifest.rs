//! Run manifests and output-directory locking.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use moce_core::error::{Error, Result};
use serde::Serialize;

/// Snapshot of everything that produced a command's outputs.
#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    /// Resolved configuration snapshot.
    pub config: serde_json::Value,
    /// SHA-256 of every input file.
    pub input_hashes: BTreeMap<String, String>,
    /// Paths written, relative to the manifest.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            input_hashes: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn hash_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::config(format!("cannot read input {}: {e}", path.display())))?;
        self.input_hashes.insert(
            path.display().to_string(),
            moce_core::model::checkpoint::hash_bytes(&bytes),
        );
        Ok(())
    }

    pub fn record_output(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    /// Write `manifest.json` alongside the outputs.
    pub fn write(mut self, dir: &Path) -> Result<()> {
        self.record_output("manifest.json");
        let json = serde_json::to_string_pretty(&self)?;
        std::fs::write(dir.join("manifest.json"), json + "\n")?;
        Ok(())
    }
}

/// Exclusive lock on an output directory. Concurrent runs must target
/// distinct directories; the lock file enforces it.
pub struct OutDirLock {
    path: PathBuf,
}

impl OutDirLock {
    pub fn acquire(dir: &Path) -> Result<OutDirLock> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".moce.lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(OutDirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::config(format!(
                "output directory {} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutDirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_excludes_and_releases() {
        let dir = tempfile::tempdir().unwrap();
        let lock = OutDirLock::acquire(dir.path()).unwrap();
        assert!(OutDirLock::acquire(dir.path()).is_err());
        drop(lock);
        let again = OutDirLock::acquire(dir.path());
        assert!(again.is_ok());
    }
}
