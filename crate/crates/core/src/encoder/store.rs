//! PRLE embedding files.
//!
//! ```text
//! "PRLE" | version: u16 | width: u32 | count: u64
//! count × [ key_len: u16 | key: UTF-8 | width × f32 ]
//! ```
//! All integers and floats little-endian; records sorted by key bytes.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Embedding, EmbeddingKey};
use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"PRLE";
pub const EMBEDDING_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 8;

/// Serializes records to bytes, sorted by key. Duplicate keys and width
/// mismatches are refused.
pub fn encode_embeddings(width: usize, entries: &[(EmbeddingKey, Embedding)]) -> Result<Vec<u8>> {
    let mut keyed: Vec<(String, &Embedding)> = entries
        .iter()
        .map(|(k, e)| (k.to_string(), e))
        .collect();
    keyed.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
    for pair in keyed.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(Error::invalid(format!("duplicate embedding key `{}`", pair[0].0)));
        }
    }
    let width32 = u32::try_from(width).map_err(|_| Error::invalid("embedding width too large"))?;
    let mut buf = Vec::with_capacity(HEADER_LEN + keyed.len() * (width * 4 + 32));
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    buf.extend_from_slice(&width32.to_le_bytes());
    buf.extend_from_slice(&(keyed.len() as u64).to_le_bytes());
    for (key, emb) in keyed {
        if emb.width() != width {
            return Err(Error::dim(format!(
                "embedding `{key}` has width {}, file width is {width}",
                emb.width()
            )));
        }
        let klen = u16::try_from(key.len()).map_err(|_| Error::invalid("key too long"))?;
        buf.extend_from_slice(&klen.to_le_bytes());
        buf.extend_from_slice(key.as_bytes());
        for v in emb.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn write_embeddings(
    path: &Path,
    width: usize,
    entries: &[(EmbeddingKey, Embedding)],
) -> Result<()> {
    let buf = encode_embeddings(width, entries)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Read-only embedding lookup loaded from a PRLE file.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    width: usize,
    path: Option<PathBuf>,
    map: HashMap<EmbeddingKey, Embedding>,
}

impl EmbeddingStore {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, key: &EmbeddingKey) -> Option<&Embedding> {
        self.map.get(key)
    }

    /// Entries sorted by key bytes.
    pub fn entries(&self) -> Vec<(EmbeddingKey, Embedding)> {
        let mut v: Vec<(EmbeddingKey, Embedding)> =
            self.map.iter().map(|(k, e)| (k.clone(), e.clone())).collect();
        v.sort_by_cached_key(|(k, _)| k.to_string());
        v
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corruption {
                offset: self.pos as u64,
                message: format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingStore> {
    if bytes.len() < 4 || &bytes[..4] != EMBEDDING_MAGIC {
        return Err(Error::Format("bad magic, expected PRLE".into()));
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = u16::from_le_bytes(cur.take(2, "header")?.try_into().unwrap());
    if version != EMBEDDING_VERSION {
        return Err(Error::Format(format!("unsupported PRLE version {version}")));
    }
    let width = u32::from_le_bytes(cur.take(4, "header")?.try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(cur.take(8, "header")?.try_into().unwrap());

    let mut map = HashMap::new();
    let mut prev: Option<String> = None;
    for _ in 0..count {
        let start = cur.pos as u64;
        let klen = u16::from_le_bytes(cur.take(2, "record key length")?.try_into().unwrap()) as usize;
        let kbytes = cur.take(klen, "record key")?;
        let key_str = std::str::from_utf8(kbytes).map_err(|_| Error::Corruption {
            offset: start,
            message: "key is not UTF-8".into(),
        })?;
        let key: EmbeddingKey = key_str.parse().map_err(|_| Error::Corruption {
            offset: start,
            message: format!("malformed key `{key_str}`"),
        })?;
        if let Some(p) = &prev {
            if p.as_bytes() >= key_str.as_bytes() {
                return Err(Error::Corruption {
                    offset: start,
                    message: format!("key `{key_str}` out of order or duplicated"),
                });
            }
        }
        let raw = cur.take(width * 4, "record values")?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        prev = Some(key_str.to_string());
        map.insert(key, Embedding::new(values));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Corruption {
            offset: cur.pos as u64,
            message: format!(
                "{} trailing bytes after {count} records (width field inconsistent with records?)",
                bytes.len() - cur.pos
            ),
        });
    }
    Ok(EmbeddingStore {
        width,
        path: None,
        map,
    })
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut store = decode_embeddings(&bytes)?;
    store.path = Some(path.to_path_buf());
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::VariantTag;

    fn entries(n: usize, width: usize) -> Vec<(EmbeddingKey, Embedding)> {
        (0..n)
            .map(|i| {
                (
                    EmbeddingKey::new(i % 3, i, VariantTag::Full),
                    Embedding::new((0..width).map(|j| (i * width + j) as f32 * 0.37 - 5.0).collect()),
                )
            })
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let e = entries(100, 16);
        let store = decode_embeddings(&encode_embeddings(16, &e).unwrap()).unwrap();
        assert_eq!(store.len(), 100);
        for (k, v) in &e {
            let got = store.get(k).unwrap();
            assert!(got.values().iter().zip(v.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn duplicates_refused() {
        let mut e = entries(3, 4);
        e.push(e[0].clone());
        assert!(encode_embeddings(4, &e).is_err());
    }

    #[test]
    fn empty_file_is_valid() {
        let store = decode_embeddings(&encode_embeddings(8, &[]).unwrap()).unwrap();
        assert!(store.is_empty());
        assert_eq!(store.width(), 8);
    }

    #[test]
    fn corrupted_magic_is_format_error() {
        let mut bytes = encode_embeddings(4, &entries(5, 4)).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_embeddings(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_embeddings(4, &entries(5, 4)).unwrap();
        match decode_embeddings(&bytes[..bytes.len() - 2]) {
            Err(Error::Corruption { offset, .. }) => assert!(offset > HEADER_LEN as u64),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn inconsistent_width_is_corruption() {
        let mut bytes = encode_embeddings(4, &entries(5, 4)).unwrap();
        bytes[6..10].copy_from_slice(&3u32.to_le_bytes());
        assert!(matches!(decode_embeddings(&bytes), Err(Error::Corruption { .. })));
    }
}
