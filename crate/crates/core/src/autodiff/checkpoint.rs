//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SSTDACKP"
//! version    u32
//! header_len u32, then header_len bytes of UTF-8 JSON
//! count      u32
//! count x { name_len u32, name bytes, ndim u32, ndim x u64 dims, f64 values }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SSTDACKP";
pub const FORMAT_VERSION: u32 = 1;

/// Free-form metadata stored in front of the tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Architecture hyperparameters of the stored model.
    pub architecture: serde_json::Value,
    pub seed: u64,
    /// Global optimizer step at save time.
    pub step: u64,
    #[serde(default)]
    pub epoch: u64,
    #[serde(default)]
    pub note: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub entries: Vec<(String, Tensor)>,
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header)?;
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(bad(path, "unexpected end of file"));
            }
            let (head, rest) = cur.split_at(n);
            cur = rest;
            Ok(head)
        };
        if take(8)? != MAGIC {
            return Err(bad(path, "bad magic"));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        let version = u32_at(take(4)?);
        if version != FORMAT_VERSION {
            return Err(bad(path, format!("unsupported version {version}")));
        }
        let hlen = u32_at(take(4)?) as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(take(hlen)?).map_err(|e| bad(path, e.to_string()))?;
        let count = u32_at(take(4)?) as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = u32_at(take(4)?) as usize;
            let name =
                String::from_utf8(take(nlen)?.to_vec()).map_err(|e| bad(path, e.to_string()))?;
            let ndim = u32_at(take(4)?) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let raw = take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push((name, Tensor::from_vec(&shape, data)?));
        }
        if !cur.is_empty() {
            return Err(bad(path, "trailing bytes"));
        }
        Ok(Checkpoint { header, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip_and_corruption() {
        let ck = Checkpoint {
            header: CheckpointHeader {
                architecture: serde_json::json!({"gru_hidden": 32}),
                seed: 7,
                step: 12,
                epoch: 1,
                note: String::new(),
            },
            entries: vec![
                (
                    "a".into(),
                    Tensor::from_vec(&[2, 2], vec![1.0, -2.5, 3.0, 1e-300]).unwrap(),
                ),
                ("b".into(), Tensor::scalar(f64::MIN_POSITIVE)),
            ],
        };
        let bytes = ck.to_bytes().unwrap();
        let p = Path::new("mem");
        assert_eq!(Checkpoint::from_bytes(&bytes, p).unwrap(), ck);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad_magic, p).is_err());
    }
}
