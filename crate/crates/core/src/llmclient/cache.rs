//! Content-addressed response cache.
//!
//! Layout: `<cache_dir>/<kind>/<hh>/<sha256>.json`, where the hash covers the
//! model id and the full serialized request. Writes go to a temp file in the
//! same directory and are renamed into place, so readers never observe a
//! partial entry. Unreadable entries are treated as misses and overwritten.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChatBackend, ChatRequest, ChatResponse, Embedder, EmbeddingVector, LlmError};

#[derive(Debug, Clone)]
struct Store {
    root: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct Entry<T> {
    key: String,
    value: T,
}

impl Store {
    fn open(dir: &Path, kind: &str) -> Result<Self, LlmError> {
        let root = dir.join(kind);
        fs::create_dir_all(&root).map_err(|e| {
            LlmError::Config(format!("cache dir {} is not writable: {e}", root.display()))
        })?;
        tempfile::NamedTempFile::new_in(&root).map_err(|e| {
            LlmError::Config(format!("cache dir {} is not writable: {e}", root.display()))
        })?;
        Ok(Store { root })
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.root.join(&key[..2]).join(format!("{key}.json"))
    }

    fn get<T: DeserializeOwned>(&self, key: &str) -> Option<T> {
        let bytes = fs::read(self.path_for(key)).ok()?;
        match serde_json::from_slice::<Entry<T>>(&bytes) {
            Ok(entry) if entry.key == key => Some(entry.value),
            _ => {
                log::warn!("discarding corrupt cache entry {key}");
                None
            }
        }
    }

    fn put<T: Serialize>(&self, key: &str, value: &T) {
        if let Err(e) = self.try_put(key, value) {
            log::warn!("cache write for {key} failed: {e}");
        }
    }

    fn try_put<T: Serialize>(&self, key: &str, value: &T) -> std::io::Result<()> {
        let path = self.path_for(key);
        let parent = path.parent().expect("cache path has a parent");
        fs::create_dir_all(parent)?;
        let mut tmp = tempfile::NamedTempFile::new_in(parent)?;
        serde_json::to_writer(&mut tmp, &Entry { key: key.to_string(), value })?;
        tmp.flush()?;
        tmp.persist(&path).map_err(|e| e.error)?;
        Ok(())
    }
}

fn digest<T: Serialize + ?Sized>(material: &T) -> String {
    let bytes = serde_json::to_vec(material).expect("cache key material serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// Cache key for a chat request: stable across processes and runs.
pub fn request_key(request: &ChatRequest) -> String {
    digest(&(&request.model_id, request))
}

pub struct CachedBackend<B> {
    inner: B,
    store: Store,
}

impl<B> CachedBackend<B> {
    pub fn new(inner: B, cache_dir: impl AsRef<Path>) -> Result<Self, LlmError> {
        Ok(CachedBackend { inner, store: Store::open(cache_dir.as_ref(), "chat")? })
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: ChatBackend> ChatBackend for CachedBackend<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        let key = request_key(request);
        if let Some(mut hit) = self.store.get::<ChatResponse>(&key) {
            hit.cached = true;
            return Ok(hit);
        }
        let mut response = self.inner.complete(request)?;
        response.cached = false;
        self.store.put(&key, &response);
        Ok(response)
    }
}

pub struct CachedEmbedder<E> {
    inner: E,
    store: Store,
}

impl<E> CachedEmbedder<E> {
    pub fn new(inner: E, cache_dir: impl AsRef<Path>) -> Result<Self, LlmError> {
        Ok(CachedEmbedder { inner, store: Store::open(cache_dir.as_ref(), "embed")? })
    }
}

impl<E: Embedder> Embedder for CachedEmbedder<E> {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, LlmError> {
        let key = digest(&(self.inner.model_id(), text));
        if let Some(hit) = self.store.get::<EmbeddingVector>(&key) {
            return Ok(hit);
        }
        let v = self.inner.embed(text)?;
        self.store.put(&key, &v);
        Ok(v)
    }

    fn model_id(&self) -> &str {
        self.inner.model_id()
    }
}
