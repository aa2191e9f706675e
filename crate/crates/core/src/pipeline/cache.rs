//! Content-addressed cache for per-subject and per-fold artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Bumped whenever an artifact format or the algorithm behind it changes.
pub const ARTIFACT_VERSION: u32 = 1;

/// Hex SHA-256 of the JSON encoding of `value`, salted with
/// [`ARTIFACT_VERSION`] and a `kind` tag.
pub fn content_hash<T: Serialize + ?Sized>(kind: &str, value: &T) -> Result<String> {
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    h.update(ARTIFACT_VERSION.to_le_bytes());
    h.update(serde_json::to_vec(value)?);
    Ok(hex::encode(h.finalize()))
}

/// Directory layout `<root>/<kind>/<name>-<hash prefix>/`; an entry counts
/// as complete once its `DONE` marker exists.
#[derive(Debug, Clone)]
pub struct Cache {
    root: PathBuf,
}

const MARKER: &str = "DONE";

impl Cache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entry(&self, kind: &str, name: &str, hash: &str) -> PathBuf {
        self.root.join(kind).join(format!("{name}-{}", &hash[..16]))
    }

    pub fn is_complete(&self, dir: &Path) -> bool {
        dir.join(MARKER).is_file()
    }

    /// Clears a stale entry and returns it ready for writing.
    pub fn begin(&self, dir: &Path) -> Result<()> {
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        fs::create_dir_all(dir)?;
        Ok(())
    }

    pub fn finish(&self, dir: &Path, hash: &str) -> Result<()> {
        fs::write(dir.join(MARKER), format!("{hash}\n"))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_depends_on_kind_and_value() {
        let a = content_hash("x", &[1, 2]).unwrap();
        assert_eq!(a.len(), 64);
        assert_eq!(a, content_hash("x", &[1, 2]).unwrap());
        assert_ne!(a, content_hash("y", &[1, 2]).unwrap());
        assert_ne!(a, content_hash("x", &[1, 3]).unwrap());
    }

    #[test]
    fn entries_complete_only_after_finish() {
        let tmp = tempfile::tempdir().unwrap();
        let c = Cache::new(tmp.path());
        let h = content_hash("k", &0).unwrap();
        let d = c.entry("k", "n", &h);
        c.begin(&d).unwrap();
        assert!(!c.is_complete(&d));
        c.finish(&d, &h).unwrap();
        assert!(c.is_complete(&d));
    }
}
