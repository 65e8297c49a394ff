use std::collections::HashMap;
use std::sync::RwLock;

use super::{mock_encode, Embedding, EmbeddingKey, EncoderHandle};
use crate::error::{Error, Result};
use crate::imaging::Frame;

/// Memo of computed embeddings, safe for concurrent readers and writers.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    map: RwLock<HashMap<EmbeddingKey, Embedding>>,
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &EmbeddingKey) -> Option<Embedding> {
        self.map.read().unwrap().get(key).cloned()
    }

    pub fn insert(&self, key: EmbeddingKey, value: Embedding) {
        self.map.write().unwrap().insert(key, value);
    }

    pub fn len(&self) -> usize {
        self.map.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Snapshot sorted by key bytes.
    pub fn entries(&self) -> Vec<(EmbeddingKey, Embedding)> {
        let mut v: Vec<(EmbeddingKey, Embedding)> = self
            .map
            .read()
            .unwrap()
            .iter()
            .map(|(k, e)| (k.clone(), e.clone()))
            .collect();
        v.sort_by_cached_key(|(k, _)| k.to_string());
        v
    }
}

/// Like [`cached_encode`] but builds the image only on a mock cache miss.
pub fn cached_encode_with(
    handle: &EncoderHandle,
    cache: &EmbeddingCache,
    key: &EmbeddingKey,
    image: impl FnOnce() -> Result<Frame>,
) -> Result<Embedding> {
    let found = match handle.store() {
        Some(store) => store
            .get(key)
            .cloned()
            .ok_or_else(|| Error::MissingEmbedding(key.to_string()))?,
        None => {
            if let Some(hit) = cache.get(key) {
                return Ok(hit);
            }
            let e = mock_encode(handle, &image()?)?;
            cache.insert(key.clone(), e.clone());
            e
        }
    };
    if found.width() != handle.width() {
        return Err(Error::dim(format!(
            "embedding `{key}` has width {}, encoder width is {}",
            found.width(),
            handle.width()
        )));
    }
    Ok(found)
}

pub fn cached_encode(
    handle: &EncoderHandle,
    cache: &EmbeddingCache,
    key: &EmbeddingKey,
    image: &Frame,
) -> Result<Embedding> {
    cached_encode_with(handle, cache, key, || Ok(image.clone()))
}
