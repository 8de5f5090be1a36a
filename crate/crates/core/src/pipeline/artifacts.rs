//! Content-addressed artifact bookkeeping for a run directory.
//!
//! Every stage output is filed under a key that hashes the stage's config,
//! seed, and upstream keys. The manifest maps keys to file paths plus
//! content hashes, so a rerun with identical inputs can skip the work and a
//! changed config can never alias an old artifact. Manifest updates go
//! through a lock file, keeping concurrent processes on the same run
//! directory from interleaving read-modify-write cycles.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

/// Hex sha256 over length-prefixed parts, so no two part lists collide by
/// concatenation.
pub fn content_key(parts: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    hex(&hasher.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FileRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stage: String,
    pub seed: u64,
    pub files: Vec<FileRef>,
}

#[derive(Default, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    entries: BTreeMap<String, ManifestEntry>,
}

pub struct ArtifactStore {
    run_dir: PathBuf,
    lock_timeout: Duration,
}

struct LockGuard {
    path: PathBuf,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

impl ArtifactStore {
    pub fn open(run_dir: impl Into<PathBuf>) -> Result<Self> {
        let run_dir = run_dir.into();
        std::fs::create_dir_all(&run_dir)?;
        Ok(Self {
            run_dir,
            lock_timeout: Duration::from_secs(10),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.run_dir
    }

    /// Absolute path for a manifest-relative file.
    pub fn abs(&self, rel: &str) -> PathBuf {
        self.run_dir.join(rel)
    }

    fn manifest_path(&self) -> PathBuf {
        self.run_dir.join("manifest.json")
    }

    fn acquire_lock(&self) -> Result<LockGuard> {
        let path = self.run_dir.join("manifest.lock");
        let start = Instant::now();
        loop {
            match std::fs::OpenOptions::new()
                .write(true)
                .create_new(true)
                .open(&path)
            {
                Ok(_) => return Ok(LockGuard { path }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    if start.elapsed() > self.lock_timeout {
                        return Err(Error::State(format!(
                            "manifest lock at {} looks stale; remove it to proceed",
                            path.display()
                        )));
                    }
                    std::thread::sleep(Duration::from_millis(25));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    fn read_manifest(&self) -> Result<Manifest> {
        let path = self.manifest_path();
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let text = std::fs::read_to_string(&path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// The manifest entry for `key`, but only if every file it lists still
    /// exists with the recorded hash. A half-deleted or edited artifact
    /// reads as absent rather than as silently stale.
    pub fn lookup(&self, key: &str) -> Result<Option<ManifestEntry>> {
        let manifest = self.read_manifest()?;
        let Some(entry) = manifest.entries.get(key) else {
            return Ok(None);
        };
        for file in &entry.files {
            let path = self.abs(&file.path);
            if !path.exists() || file_sha256(&path)? != file.sha256 {
                return Ok(None);
            }
        }
        Ok(Some(entry.clone()))
    }

    /// Registers files (already written into the run directory) under `key`.
    pub fn record(&self, key: &str, stage: &str, seed: u64, rel_paths: &[String]) -> Result<()> {
        let mut files = Vec::with_capacity(rel_paths.len());
        for rel in rel_paths {
            files.push(FileRef {
                path: rel.clone(),
                sha256: file_sha256(&self.abs(rel))?,
            });
        }
        let _guard = self.acquire_lock()?;
        let mut manifest = self.read_manifest()?;
        manifest.version = 1;
        manifest.entries.insert(
            key.to_string(),
            ManifestEntry {
                stage: stage.to_string(),
                seed,
                files,
            },
        );
        let tmp = self.manifest_path().with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(&manifest)?)?;
        std::fs::rename(&tmp, self.manifest_path())?;
        Ok(())
    }

    pub fn manifest_len(&self) -> Result<usize> {
        Ok(self.read_manifest()?.entries.len())
    }

    /// Drops one entry from the manifest so the stage reads as not done.
    /// The files themselves stay in place until overwritten.
    pub fn invalidate(&self, key: &str) -> Result<()> {
        let _guard = self.acquire_lock()?;
        let mut manifest = self.read_manifest()?;
        if manifest.entries.remove(key).is_some() {
            let tmp = self.manifest_path().with_extension("json.tmp");
            std::fs::write(&tmp, serde_json::to_string_pretty(&manifest)?)?;
            std::fs::rename(&tmp, self.manifest_path())?;
        }
        Ok(())
    }

    /// Every manifest entry for a stage, key included, sorted by key.
    pub fn entries_for_stage(&self, stage: &str) -> Result<Vec<(String, ManifestEntry)>> {
        let manifest = self.read_manifest()?;
        Ok(manifest
            .entries
            .into_iter()
            .filter(|(_, e)| e.stage == stage)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_distinguish_part_boundaries() {
        assert_ne!(content_key(&["ab", "c"]), content_key(&["a", "bc"]));
        assert_ne!(content_key(&["ab"]), content_key(&["ab", ""]));
        assert_eq!(content_key(&["x", "y"]), content_key(&["x", "y"]));
        assert_eq!(content_key(&[]).len(), 64);
    }

    #[test]
    fn lookup_misses_until_recorded_and_validates_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::open(dir.path().join("run")).unwrap();
        let key = content_key(&["stage", "1"]);
        assert!(store.lookup(&key).unwrap().is_none());

        std::fs::write(store.abs("out.txt"), "hello").unwrap();
        store
            .record(&key, "stage", 1, &["out.txt".into()])
            .unwrap();
        let entry = store.lookup(&key).unwrap().unwrap();
        assert_eq!(entry.stage, "stage");
        assert_eq!(entry.files.len(), 1);

        // tampering invalidates the entry
        std::fs::write(store.abs("out.txt"), "tampered").unwrap();
        assert!(store.lookup(&key).unwrap().is_none());

        // deleting does too
        std::fs::remove_file(store.abs("out.txt")).unwrap();
        assert!(store.lookup(&key).unwrap().is_none());
    }

    #[test]
    fn records_accumulate_and_filter_by_stage() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::open(dir.path()).unwrap();
        std::fs::write(store.abs("a"), "a").unwrap();
        std::fs::write(store.abs("b"), "b").unwrap();
        store.record("k1", "alpha", 1, &["a".into()]).unwrap();
        store.record("k2", "beta", 2, &["b".into()]).unwrap();
        assert_eq!(store.entries_for_stage("alpha").unwrap().len(), 1);
        assert_eq!(store.entries_for_stage("beta").unwrap().len(), 1);
        assert_eq!(store.entries_for_stage("gamma").unwrap().len(), 0);
    }

    #[test]
    fn stale_lock_times_out_gracefully() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ArtifactStore::open(dir.path()).unwrap();
        store.lock_timeout = Duration::from_millis(100);
        // a crashed process left the lock behind; record() waits then errors
        std::fs::write(dir.path().join("manifest.lock"), "").unwrap();
        std::fs::write(store.abs("a"), "a").unwrap();
        let result = store.record("k", "s", 0, &["a".into()]);
        assert!(matches!(result, Err(Error::State(_))));
    }
}
