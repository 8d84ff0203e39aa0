//! Run manifests and the single-writer lock on output directories.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use gaitadapt_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::config::StreamSource;
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const LOCK: &str = ".lock";

pub fn version() -> String {
    format!("gaitadapt {}", env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub step: usize,
    pub path: String,
    pub seconds: f64,
}

/// Everything needed to reproduce and audit one run. Paths are relative to
/// the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub version: String,
    pub seed: u64,
    pub method: String,
    pub config: TrainConfig,
    pub stream: StreamSource,
    pub stream_fingerprint: String,
    pub checkpoints: Vec<CheckpointEntry>,
    pub log: Option<String>,
    pub reports: Vec<String>,
    pub backtest_seconds: Option<f64>,
    /// Every file the run directory owns, sorted.
    pub files: Vec<String>,
}

impl ExperimentManifest {
    pub fn register(&mut self, file: impl Into<String>) {
        let f = file.into();
        if let Err(i) = self.files.binary_search(&f) {
            self.files.insert(i, f);
        }
    }

    pub fn last_step(&self) -> usize {
        self.checkpoints.iter().map(|c| c.step).max().unwrap_or(0)
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("{} is not a run manifest: {e}", path.display())).into())
    }

    /// Writes through a temporary file so readers never see a partial
    /// manifest.
    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let tmp = dir.join(format!("{MANIFEST}.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(self)? + "\n").with_context(|| format!("writing {}", tmp.display()))?;
        fs::rename(&tmp, dir.join(MANIFEST))?;
        Ok(())
    }
}

/// Resolves a command argument naming a run directory or its manifest.
pub fn manifest_path(arg: &Path) -> PathBuf {
    if arg.is_dir() {
        arg.join(MANIFEST)
    } else {
        arg.to_path_buf()
    }
}

/// Exclusive claim on a directory, released on drop.
#[derive(Debug)]
pub struct DirLock(PathBuf);

impl DirLock {
    pub fn acquire(dir: &Path) -> anyhow::Result<DirLock> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(LOCK);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => {
                fs::write(&path, std::process::id().to_string())?;
                Ok(DirLock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(dir.to_path_buf()).into()),
            Err(e) => Err(anyhow::Error::new(e).context(format!("locking {}", dir.display()))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Entries of `dir` other than the lock file.
pub fn contents(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.file_name().is_some_and(|n| n != LOCK) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Removes everything in `dir` except the lock file.
pub fn clear(dir: &Path) -> anyhow::Result<()> {
    for p in contents(dir)? {
        if p.is_dir() {
            fs::remove_dir_all(&p)?;
        } else {
            fs::remove_file(&p)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let d = tempfile::tempdir().unwrap();
        let a = DirLock::acquire(d.path()).unwrap();
        let err = DirLock::acquire(d.path()).unwrap_err();
        assert!(matches!(err.downcast_ref::<CliError>(), Some(CliError::Locked(_))));
        drop(a);
        DirLock::acquire(d.path()).unwrap();
    }

    #[test]
    fn clear_keeps_lock() {
        let d = tempfile::tempdir().unwrap();
        let _l = DirLock::acquire(d.path()).unwrap();
        fs::create_dir(d.path().join("sub")).unwrap();
        fs::write(d.path().join("f"), "x").unwrap();
        clear(d.path()).unwrap();
        assert!(contents(d.path()).unwrap().is_empty());
        assert!(d.path().join(LOCK).exists());
    }
}
