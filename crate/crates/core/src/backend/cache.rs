//! On-disk response cache: one `<sha256>.json` file per request.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, CompletionRequest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedRequest {
    pub provider: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub attempt: u32,
    pub tag: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedResponse {
    pub text: String,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub request: CachedRequest,
    pub response: CachedResponse,
    pub created_at: String,
}

/// Cache key over provider, model, sampling parameters, stage tag, attempt
/// number and prompt.
///
/// The attempt number is part of the key so that a retry after an
/// unparseable answer reaches the provider instead of the cached failure.
pub fn cache_key(provider: &str, model: &str, req: &CompletionRequest, attempt: u32) -> String {
    let mut h = Sha256::new();
    for part in [
        provider,
        model,
        &format!("{:.6}", req.temperature),
        &req.max_tokens.to_string(),
        &req.tag,
        &attempt.to_string(),
        &req.prompt,
    ] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    seq: AtomicU64,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| BackendError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(ResponseCache {
            dir,
            seq: AtomicU64::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    /// A missing or unreadable entry is a miss.
    pub fn get(&self, key: &str) -> Option<CacheEntry> {
        let text = fs::read_to_string(self.path(key)).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// Writes through a temp file and renames it into place.
    pub fn put(&self, entry: &CacheEntry) -> Result<(), BackendError> {
        let n = self.seq.fetch_add(1, Ordering::Relaxed);
        let tmp = self
            .dir
            .join(format!(".{}.{}.{n}.tmp", entry.key, std::process::id()));
        let body = serde_json::to_vec_pretty(entry).map_err(|e| BackendError::Cache(e.to_string()))?;
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&body)?;
            f.sync_all()?;
            fs::rename(&tmp, self.path(&entry.key))
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            BackendError::Cache(format!("{}: {e}", self.dir.display()))
        })
    }

    pub fn len(&self) -> usize {
        fs::read_dir(&self.dir)
            .map(|rd| {
                rd.filter_map(Result::ok)
                    .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
                    .count()
            })
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(key: &str) -> CacheEntry {
        CacheEntry {
            key: key.into(),
            request: CachedRequest {
                provider: "p".into(),
                model: "m".into(),
                temperature: 0.3,
                max_tokens: 10,
                attempt: 0,
                tag: "t".into(),
                prompt: "hello".into(),
            },
            response: CachedResponse {
                text: "world".into(),
                prompt_tokens: Some(1),
                completion_tokens: None,
                latency_ms: 12,
            },
            created_at: "2026-01-01T00:00:00Z".into(),
        }
    }

    #[test]
    fn put_then_get() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path().join("cache")).unwrap();
        assert!(cache.get("abc").is_none());
        cache.put(&entry("abc")).unwrap();
        assert_eq!(cache.get("abc").unwrap(), entry("abc"));
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn key_depends_on_every_component() {
        let req = CompletionRequest::new("t", "hello");
        let base = cache_key("p", "m", &req, 0);
        assert_eq!(base.len(), 64);
        assert_ne!(base, cache_key("q", "m", &req, 0));
        assert_ne!(base, cache_key("p", "n", &req, 0));
        assert_ne!(base, cache_key("p", "m", &req, 1));
        let mut hot = req.clone();
        hot.temperature = 0.7;
        assert_ne!(base, cache_key("p", "m", &hot, 0));
        let other = CompletionRequest::new("t", "hello!");
        assert_ne!(base, cache_key("p", "m", &other, 0));
        let retagged = CompletionRequest::new("other", "hello");
        assert_ne!(base, cache_key("p", "m", &retagged, 0));
        let mut short = req.clone();
        short.max_tokens = 16;
        assert_ne!(base, cache_key("p", "m", &short, 0));
    }
}
