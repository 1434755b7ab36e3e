//! Named-tensor container used for model checkpoints.
//!
//! Little-endian layout: magic `MTC1`, u32 version, u32 tensor count, then per
//! tensor a u32 name length, the UTF-8 name, u32 rank, `rank` u32 dims and the
//! f64 payload. A JSON manifest with the same stem describes the contents.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MTC1";
pub const VERSION: u32 = 1;

pub fn encode_tensors(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Input("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = r
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::TrailingData {
            found: bytes.len() - r.pos,
        });
    }
    Ok(out)
}

/// `<stem>.bin` and `<stem>.json`.
pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

/// Write tensors and a manifest side by side.
pub fn save<M: Serialize>(stem: &Path, tensors: &[(String, Tensor)], manifest: &M) -> Result<()> {
    let (bin, json) = paths(stem);
    fs::write(&bin, encode_tensors(tensors)).map_err(|e| Error::io(&bin, e))?;
    let mut text = serde_json::to_vec_pretty(manifest)?;
    text.push(b'\n');
    fs::write(&json, text).map_err(|e| Error::io(&json, e))
}

pub fn load<M: DeserializeOwned>(stem: &Path) -> Result<(Vec<(String, Tensor)>, M)> {
    let (bin, json) = paths(stem);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let text = fs::read(&json).map_err(|e| Error::io(&json, e))?;
    Ok((decode_tensors(&bytes)?, serde_json::from_slice(&text)?))
}

/// Name and shape of one stored tensor, as listed in manifests.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

pub fn entries(tensors: &[(String, Tensor)]) -> Vec<TensorEntry> {
    tensors
        .iter()
        .map(|(name, t)| TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            (
                "a.weight".into(),
                Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1),
            ),
            ("b".into(), Tensor::scalar(-1.5)),
        ]
    }

    #[test]
    fn round_trip() {
        let bytes = encode_tensors(&sample());
        assert_eq!(decode_tensors(&bytes).unwrap(), sample());
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ck");
        save(&stem, &sample(), &entries(&sample())).unwrap();
        let (t, m): (_, Vec<TensorEntry>) = load(&stem).unwrap();
        assert_eq!(t, sample());
        assert_eq!(m[0].shape, vec![2, 3]);
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = encode_tensors(&sample());
        assert!(matches!(
            decode_tensors(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            decode_tensors(&extra),
            Err(Error::TrailingData { .. })
        ));
        let mut bad = bytes;
        bad[3] = b'9';
        assert!(matches!(decode_tensors(&bad), Err(Error::BadMagic { .. })));
    }
}
