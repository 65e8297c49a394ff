//! `PRLH` head files.
//!
//! ```text
//! "PRLH" | u16 version | u8 kind | u32 in_width | f64 temperature
//! u32 hyper_len | hyper (JSON) | u32 tensor_count
//! per tensor: u16 name_len | name | u8 rank | rank × u64 dims | f64 data
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use super::{ContrastiveHead, FinetuneHyper, HeadKind};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const HEAD_MAGIC: &[u8; 4] = b"PRLH";
pub const HEAD_VERSION: u16 = 1;

pub fn encode_head(head: &ContrastiveHead) -> Result<Vec<u8>> {
    let hyper = serde_json::to_vec(&head.hyper).map_err(|e| Error::Format(format!("head hyperparameters: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(HEAD_MAGIC);
    out.extend_from_slice(&HEAD_VERSION.to_le_bytes());
    out.push(head.kind.tag());
    out.extend_from_slice(&u32_of(head.in_width, "input width")?.to_le_bytes());
    out.extend_from_slice(&head.temperature.to_le_bytes());
    out.extend_from_slice(&u32_of(hyper.len(), "hyperparameter block")?.to_le_bytes());
    out.extend_from_slice(&hyper);
    out.extend_from_slice(&u32_of(head.params.len(), "tensor count")?.to_le_bytes());
    for (name, t) in &head.params {
        let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("tensor name `{name}` too long")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.shape().len()).map_err(|_| Error::invalid("tensor rank above 255"))?;
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::invalid(format!("{what} {n} does not fit in u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corruption {
                offset: self.pos as u64,
                message: format!("truncated {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn corrupt(&self, at: usize, message: String) -> Error {
        Error::Corruption { offset: at as u64, message }
    }
}

pub fn decode_head(bytes: &[u8]) -> Result<ContrastiveHead> {
    if bytes.len() < 4 || &bytes[..4] != HEAD_MAGIC {
        return Err(Error::Format("not a PRLH head file (bad magic)".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = u16::from_le_bytes(r.array("version")?);
    if version != HEAD_VERSION {
        return Err(Error::Version { found: version as u32, expected: HEAD_VERSION as u32 });
    }
    let at = r.pos;
    let tag = r.array::<1>("kind")?[0];
    let kind = HeadKind::from_tag(tag).ok_or_else(|| r.corrupt(at, format!("unknown head kind {tag}")))?;
    let in_width = u32::from_le_bytes(r.array("input width")?) as usize;
    let temperature = f64::from_le_bytes(r.array("temperature")?);
    let hyper_len = u32::from_le_bytes(r.array("hyperparameter length")?) as usize;
    let at = r.pos;
    let hyper: FinetuneHyper = serde_json::from_slice(r.take(hyper_len, "hyperparameters")?)
        .map_err(|e| r.corrupt(at, format!("hyperparameters: {e}")))?;
    let count = u32::from_le_bytes(r.array("tensor count")?) as usize;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let at = r.pos;
        let len = u16::from_le_bytes(r.array("name length")?) as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| r.corrupt(at, "tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.array::<1>("rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(r.array("dimension")?) as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes_needed = n.and_then(|n| n.checked_mul(8));
        let at = r.pos;
        let raw = match bytes_needed {
            Some(b) => r.take(b, "tensor data")?,
            None => return Err(r.corrupt(at, format!("tensor `{name}` shape {shape:?} overflows"))),
        };
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(&shape, data).map_err(|e| r.corrupt(at, format!("tensor `{name}`: {e}")))?;
        params.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(r.corrupt(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let head = ContrastiveHead { kind, in_width, temperature, hyper, params };
    head.check()?;
    Ok(head)
}

pub fn write_head(path: &Path, head: &ContrastiveHead) -> Result<()> {
    let bytes = encode_head(head)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_head(path: &Path) -> Result<ContrastiveHead> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_head(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finetune::DimMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head() -> ContrastiveHead {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        ContrastiveHead {
            kind: HeadKind::Dim(DimMode::SpatioTemporal),
            in_width: 5,
            temperature: 1.0,
            hyper: FinetuneHyper { dim_proj: 3, lr: 0.1 + 0.2, ..FinetuneHyper::default() },
            params: vec![
                ("phi_w".into(), Tensor::randn(&[5, 3], 1.0, &mut rng)),
                ("phi_b".into(), Tensor::randn(&[3], 1e-300, &mut rng)),
                ("w".into(), Tensor::identity(3)),
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let h = head();
        let bytes = encode_head(&h).unwrap();
        let back = decode_head(&bytes).unwrap();
        assert_eq!(back, h);
        for ((_, a), (_, b)) in h.params.iter().zip(&back.params) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.hyper.lr.to_bits(), (0.1f64 + 0.2).to_bits());
        assert_eq!(encode_head(&back).unwrap(), bytes);
    }

    #[test]
    fn damage_is_reported() {
        let bytes = encode_head(&head()).unwrap();
        assert!(matches!(decode_head(b"PRLE\x01\x00"), Err(Error::Format(_))));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(decode_head(&v), Err(Error::Version { found: 9, .. })));
        assert!(matches!(decode_head(&bytes[..bytes.len() - 3]), Err(Error::Corruption { .. })));
        let mut v = bytes.clone();
        v.push(0);
        assert!(matches!(decode_head(&v), Err(Error::Corruption { .. })));
        let mut v = bytes;
        v[6] = 42;
        assert!(matches!(decode_head(&v), Err(Error::Corruption { offset: 6, .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("head.prlh");
        write_head(&p, &head()).unwrap();
        assert_eq!(read_head(&p).unwrap(), head());
        assert!(matches!(read_head(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
