//! On-disk stage caches keyed by content hashes.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::digest::write_atomic;

/// A value plus whether it came from cache.
#[derive(Debug, Clone, PartialEq)]
pub struct Cached<T> {
    pub value: T,
    pub hit: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitMiss {
    pub hits: u64,
    pub misses: u64,
}

/// JSON entries under `{root}/{stage}/{key}.json`.
///
/// Each entry stores the key it was written under; an entry whose stored key
/// disagrees with the file name is treated as a miss.
#[derive(Debug)]
pub struct StageCache {
    dir: PathBuf,
    hits: AtomicU64,
    misses: AtomicU64,
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    key: String,
    value: T,
}

impl StageCache {
    pub fn new(root: &Path, stage: &str) -> Self {
        Self {
            dir: root.join(stage),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &str, ext: &str) -> PathBuf {
        self.dir.join(format!("{key}.{ext}"))
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Option<T> {
        let found = std::fs::read(self.path_for(key, "json"))
            .ok()
            .and_then(|b| serde_json::from_slice::<Envelope<T>>(&b).ok())
            .filter(|e| e.key == key)
            .map(|e| e.value);
        self.count(found.is_some());
        found
    }

    pub fn put<T: Serialize>(&self, key: &str, value: &T) -> std::io::Result<()> {
        let bytes = serde_json::to_vec(&Envelope { key: key.to_string(), value }).expect("serializable");
        write_atomic(&self.path_for(key, "json"), &bytes)
    }

    /// Raw-bytes variant for binary artifacts (rendered images).
    pub fn get_bytes(&self, key: &str, ext: &str) -> Option<Vec<u8>> {
        let found = std::fs::read(self.path_for(key, ext)).ok();
        self.count(found.is_some());
        found
    }

    pub fn put_bytes(&self, key: &str, ext: &str, bytes: &[u8]) -> std::io::Result<()> {
        write_atomic(&self.path_for(key, ext), bytes)
    }

    pub fn count(&self, hit: bool) {
        if hit {
            self.hits.fetch_add(1, Ordering::Relaxed);
        } else {
            self.misses.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn stats(&self) -> HitMiss {
        HitMiss {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
        }
    }
}
