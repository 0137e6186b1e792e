use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{LlmBackend, LlmRequest, TransportError};
use crate::util::sha256_hex;

#[derive(Serialize, Deserialize)]
struct CacheLine {
    request_hash: String,
    raw: String,
}

/// Stable hash over everything that can change a completion.
pub fn request_hash(req: &LlmRequest, backend: &str) -> String {
    let key = json!({
        "backend": backend,
        "kind": req.kind,
        "rendered": req.rendered,
        "context": req.context,
        "max_tokens": req.max_tokens,
        "temperature": req.temperature,
    });
    sha256_hex(key.to_string().as_bytes())
}

/// Write-once response cache in front of another backend, optionally
/// persisted as append-only JSONL of `{request_hash, raw}`.
pub struct CachedBackend<B> {
    inner: B,
    path: Option<PathBuf>,
    entries: Mutex<HashMap<String, String>>,
    misses: AtomicUsize,
    file_lock: Mutex<()>,
}

impl<B: LlmBackend> CachedBackend<B> {
    pub fn in_memory(inner: B) -> Self {
        Self {
            inner,
            path: None,
            entries: Mutex::new(HashMap::new()),
            misses: AtomicUsize::new(0),
            file_lock: Mutex::new(()),
        }
    }

    /// Opens (or starts) the cache file at `path`. Later lines never
    /// override earlier ones.
    pub fn open(inner: B, path: &Path) -> std::io::Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheLine>(&line) {
                    Ok(l) => {
                        entries.entry(l.request_hash).or_insert(l.raw);
                    }
                    Err(e) => log::warn!("skipping corrupt cache line in {}: {e}", path.display()),
                }
            }
        }
        Ok(Self {
            inner,
            path: Some(path.to_path_buf()),
            entries: Mutex::new(entries),
            misses: AtomicUsize::new(0),
            file_lock: Mutex::new(()),
        })
    }

    /// Number of requests forwarded to the inner backend.
    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::SeqCst)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: LlmBackend> LlmBackend for CachedBackend<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn call(&self, req: &LlmRequest) -> Result<String, TransportError> {
        let h = request_hash(req, self.inner.name());
        if let Some(raw) = self.entries.lock().unwrap().get(&h) {
            return Ok(raw.clone());
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        let raw = self.inner.call(req)?;
        let fresh = {
            let mut e = self.entries.lock().unwrap();
            if e.contains_key(&h) {
                false
            } else {
                e.insert(h.clone(), raw.clone());
                true
            }
        };
        if fresh {
            if let Some(path) = &self.path {
                let _guard = self.file_lock.lock().unwrap();
                let line = serde_json::to_string(&CacheLine {
                    request_hash: h,
                    raw: raw.clone(),
                })
                .unwrap();
                let res = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .and_then(|mut f| writeln!(f, "{line}"));
                if let Err(e) = res {
                    log::warn!("could not append to response cache {}: {e}", path.display());
                }
            }
        }
        Ok(raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{MockBackend, PromptKind};

    fn req(text: &str) -> LlmRequest {
        LlmRequest::new(
            PromptKind::Summarize,
            text.to_string(),
            json!({"attributes": {"title": text}}),
        )
    }

    #[test]
    fn warm_cache_issues_no_calls() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let cold = CachedBackend::open(MockBackend::default(), &path).unwrap();
        let a = cold.call(&req("alpha")).unwrap();
        cold.call(&req("beta")).unwrap();
        cold.call(&req("alpha")).unwrap();
        assert_eq!(cold.misses(), 2);

        let warm = CachedBackend::open(MockBackend::default(), &path).unwrap();
        assert_eq!(warm.len(), 2);
        assert_eq!(warm.call(&req("alpha")).unwrap(), a);
        warm.call(&req("beta")).unwrap();
        assert_eq!(warm.misses(), 0);
    }

    #[test]
    fn hash_depends_on_rendered_text() {
        assert_ne!(request_hash(&req("a"), "mock"), request_hash(&req("b"), "mock"));
        assert_ne!(request_hash(&req("a"), "mock"), request_hash(&req("a"), "remote"));
    }
}
