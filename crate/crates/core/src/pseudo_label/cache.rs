//! Append-only response cache keyed by call idempotency keys.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::backend::{BackendKind, CallKey, Capabilities, ChatBackend, ChatRequest, ChatResponse};
use crate::error::{Error, Result};
use crate::store;

const KIND: &str = "backend-cache";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    digest: String,
    key: CallKey,
    response: ChatResponse,
}

/// Wraps a backend; requests carrying a [`CallKey`] are answered from the
/// cache when possible. Later lines win over earlier ones with the same key,
/// so concurrent writers of identical content are harmless.
pub struct CachedBackend<B> {
    inner: B,
    path: Option<PathBuf>,
    entries: Mutex<HashMap<String, ChatResponse>>,
    file: Mutex<Option<File>>,
    calls: AtomicUsize,
    hits: AtomicUsize,
}

impl<B: ChatBackend> CachedBackend<B> {
    pub fn in_memory(inner: B) -> Self {
        CachedBackend {
            inner,
            path: None,
            entries: Mutex::new(HashMap::new()),
            file: Mutex::new(None),
            calls: AtomicUsize::new(0),
            hits: AtomicUsize::new(0),
        }
    }

    /// Opens (or creates) a cache file.
    pub fn open(inner: B, path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            let (_, lines) = store::split_checked(path, KIND, &bytes)?;
            for (offset, line) in lines {
                let e: Entry = serde_json::from_slice(line).map_err(|err| Error::Corrupt {
                    path: path.to_path_buf(),
                    offset: offset as u64,
                    reason: format!("bad cache entry: {err}"),
                })?;
                entries.insert(e.digest, e.response);
            }
        } else {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            std::fs::write(path, store::header_line(KIND, None)?).map_err(|e| Error::io(path, e))?;
        }
        let file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(CachedBackend {
            inner,
            path: Some(path.to_path_buf()),
            entries: Mutex::new(entries),
            file: Mutex::new(Some(file)),
            calls: AtomicUsize::new(0),
            hits: AtomicUsize::new(0),
        })
    }

    /// Calls forwarded to the wrapped backend.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    fn persist(&self, entry: &Entry) -> Result<()> {
        let mut guard = self.file.lock().expect("poisoned");
        if let Some(f) = guard.as_mut() {
            let mut line = serde_json::to_vec(entry)?;
            line.push(b'\n');
            let path = self.path.as_deref().unwrap_or(Path::new("<cache>"));
            // one write per line keeps appends atomic across processes
            f.write_all(&line).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

impl<B: ChatBackend> ChatBackend for CachedBackend<B> {
    fn kind(&self) -> BackendKind {
        self.inner.kind()
    }

    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse> {
        let Some(key) = &request.key else {
            self.calls.fetch_add(1, Ordering::SeqCst);
            return self.inner.complete(request);
        };
        let digest = key.digest();
        if let Some(hit) = self.entries.lock().expect("poisoned").get(&digest) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok(hit.clone());
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        let response = self.inner.complete(request)?;
        let entry = Entry {
            digest: digest.clone(),
            key: key.clone(),
            response: response.clone(),
        };
        self.persist(&entry)?;
        self.entries.lock().expect("poisoned").insert(digest, response.clone());
        Ok(response)
    }
}
