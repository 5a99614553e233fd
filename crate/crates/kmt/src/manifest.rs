//! Run manifests: per-stage artifact hashes, timings, and host fingerprint,
//! plus the run-directory lock that keeps one process per run.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use kmt_core::error::{Error, Result};
use kmt_core::sha256_hex;

use crate::config::ExperimentConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".kmt-lock";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Path relative to the run directory, or "builtin:<name>" for compiled-in
    /// data.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub started_unix: u64,
    pub wall_secs: f64,
    pub seed: u64,
    pub deterministic: bool,
    pub inputs: Vec<ArtifactRecord>,
    pub outputs: Vec<ArtifactRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HostInfo {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
}

impl HostInfo {
    pub fn current() -> HostInfo {
        HostInfo {
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            cpus: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub host: HostInfo,
    /// Snapshot of the experiment config this run directory was created with.
    pub config: serde_json::Value,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    fn path(out_dir: &Path) -> PathBuf {
        out_dir.join(MANIFEST_FILE)
    }

    /// Load the run directory's manifest, or start a fresh one. A directory
    /// created under a different config is refused: stage artifacts would not
    /// line up.
    pub fn load_or_new(out_dir: &Path, config: &ExperimentConfig) -> Result<RunManifest> {
        let snapshot = serde_json::to_value(config)?;
        let path = Self::path(out_dir);
        if path.exists() {
            let text = std::fs::read_to_string(&path)?;
            let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| {
                Error::DataFile(format!("{} is not a valid manifest: {e}", path.display()))
            })?;
            if manifest.config != snapshot {
                return Err(Error::Config(format!(
                    "{} was produced under a different config; point --out at a fresh \
                     directory or restore the original config",
                    out_dir.display()
                )));
            }
            return Ok(manifest);
        }
        Ok(RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            host: HostInfo::current(),
            config: snapshot,
            stages: Vec::new(),
        })
    }

    pub fn save(&self, out_dir: &Path) -> Result<()> {
        let path = Self::path(out_dir);
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }

    /// Most recent output record for a relative path, if any stage produced
    /// it.
    pub fn latest_output(&self, rel_path: &str) -> Option<&ArtifactRecord> {
        self.stages
            .iter()
            .rev()
            .flat_map(|s| s.outputs.iter())
            .find(|a| a.path == rel_path)
    }

    /// Check that an input artifact exists and still matches the hash
    /// recorded when it was produced.
    pub fn verify_input(&self, out_dir: &Path, rel_path: &str) -> Result<ArtifactRecord> {
        let record = self.latest_output(rel_path).ok_or_else(|| {
            Error::Config(format!(
                "missing upstream artifact {rel_path:?}: run the stage that produces it first"
            ))
        })?;
        let full = out_dir.join(rel_path);
        if !full.exists() {
            return Err(Error::Config(format!(
                "artifact {} is recorded in the manifest but missing on disk; \
                 re-run the stage that produces it",
                full.display()
            )));
        }
        let actual = hash_file(&full)?;
        if actual != record.sha256 {
            return Err(Error::Config(format!(
                "artifact {} was modified after it was produced (hash {} != recorded {}); \
                 re-run its stage or restore the file",
                full.display(),
                &actual[..12],
                &record.sha256[..12]
            )));
        }
        Ok(record.clone())
    }
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(sha256_hex(&bytes))
}

pub fn record_for(out_dir: &Path, rel_path: &str) -> Result<ArtifactRecord> {
    Ok(ArtifactRecord { path: rel_path.to_string(), sha256: hash_file(&out_dir.join(rel_path))? })
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Exclusive ownership of a run directory; the lock file is removed on drop.
#[derive(Debug)]
pub struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    pub fn acquire(out_dir: &Path) -> Result<LockGuard> {
        std::fs::create_dir_all(out_dir)?;
        let path = out_dir.join(LOCK_FILE);
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(LockGuard { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Config(format!(
                    "run directory {} is locked by another kmt process ({} exists); \
                     if that process is gone, delete the lock file",
                    out_dir.display(),
                    path.display()
                )))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
