//! Binary embedding store.
//!
//! Layout, all little-endian: `"TMEB1"`, `dim: u32`, `count: u64`, then
//! `count` records of `key_len: u32`, `key: UTF-8`, `modality: u8`
//! (0 image, 1 text) and `dim` `f32` values.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::encoder::Modality;
use crate::error::{Error, Result};

pub const STORE_MAGIC: &[u8; 5] = b"TMEB1";
pub const STORE_HEADER_LEN: usize = 17;

#[derive(Clone, Debug, PartialEq)]
pub struct StoredEmbedding {
    pub modality: Modality,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    dim: u32,
    entries: IndexMap<String, StoredEmbedding>,
}

impl EmbeddingStore {
    pub fn new(dim: u32) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("embedding dimension must be positive"));
        }
        Ok(EmbeddingStore {
            dim,
            entries: IndexMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, key: impl Into<String>, modality: Modality, values: Vec<f32>) -> Result<()> {
        let key = key.into();
        if values.len() != self.dim() {
            return Err(Error::Shape {
                op: "EmbeddingStore::insert",
                lhs: vec![self.dim()],
                rhs: vec![values.len()],
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("EmbeddingStore::insert"));
        }
        if self.entries.contains_key(&key) {
            return Err(Error::contract(format!("duplicate embedding key `{key}`")));
        }
        self.entries.insert(key, StoredEmbedding { modality, values });
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&StoredEmbedding> {
        self.entries.get(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// The embedding as `f64`, or an error naming the missing key.
    pub fn vector(&self, key: &str) -> Result<Vec<f64>> {
        self.get(key)
            .map(|e| e.values.iter().map(|&v| f64::from(v)).collect())
            .ok_or_else(|| Error::contract(format!("embedding key `{key}` not in store")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &StoredEmbedding)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let rec = 4 + 1 + 4 * self.dim();
        let mut out = Vec::with_capacity(STORE_HEADER_LEN + self.len() * (rec + 16));
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&self.dim.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (key, e) in &self.entries {
            out.extend_from_slice(&(key.len() as u32).to_le_bytes());
            out.extend_from_slice(key.as_bytes());
            out.push(match e.modality {
                Modality::Image => 0,
                Modality::Text => 1,
            });
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(5, "magic")?;
        if magic != STORE_MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected \"TMEB1\"")));
        }
        let dim = u32::from_le_bytes(cur.array("dimension")?);
        let count = u64::from_le_bytes(cur.array("record count")?);
        let mut store = EmbeddingStore::new(dim).map_err(|_| Error::Format("zero dimension".into()))?;
        for _ in 0..count {
            let at = cur.pos as u64;
            let klen = u32::from_le_bytes(cur.array("key length")?) as usize;
            let key = std::str::from_utf8(cur.take(klen, "key")?)
                .map_err(|e| Error::Corrupt {
                    offset: at,
                    msg: format!("key is not UTF-8: {e}"),
                })?
                .to_string();
            let modality = match cur.take(1, "modality")?[0] {
                0 => Modality::Image,
                1 => Modality::Text,
                b => {
                    return Err(Error::Corrupt {
                        offset: cur.pos as u64 - 1,
                        msg: format!("modality byte {b}"),
                    })
                }
            };
            let raw = cur.take(4 * dim as usize, "values")?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            store.insert(key, modality, values).map_err(|e| Error::Corrupt {
                offset: at,
                msg: e.to_string(),
            })?;
        }
        if cur.pos != bytes.len() {
            return Err(Error::Corrupt {
                offset: cur.pos as u64,
                msg: format!("{} trailing bytes", bytes.len() - cur.pos),
            });
        }
        Ok(store)
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut buf = Vec::new();
        input.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            let err = if self.pos < STORE_HEADER_LEN {
                Error::Format(format!("truncated header reading {what}"))
            } else {
                Error::Corrupt {
                    offset: self.pos as u64,
                    msg: format!("truncated record reading {what}"),
                }
            };
            return Err(err);
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EmbeddingStore {
        let mut s = EmbeddingStore::new(3).unwrap();
        s.insert("a/image", Modality::Image, vec![1.0, -2.5, 0.125]).unwrap();
        s.insert("a/impression", Modality::Text, vec![0.0, 3.0, -1.0]).unwrap();
        s
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let s = sample();
        let bytes = s.to_bytes();
        let back = EmbeddingStore::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn empty_store_is_header_only() {
        let bytes = EmbeddingStore::new(8).unwrap().to_bytes();
        assert_eq!(bytes.len(), STORE_HEADER_LEN);
        assert_eq!(&bytes[..5], b"TMEB1");
        assert_eq!(&bytes[5..9], &8u32.to_le_bytes());
        assert_eq!(EmbeddingStore::from_bytes(&bytes).unwrap().len(), 0);
    }

    #[test]
    fn flipped_magic_is_a_format_error() {
        let mut bytes = sample().to_bytes();
        bytes[0] ^= 0x01;
        assert!(matches!(EmbeddingStore::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample().to_bytes();
        let cut = &bytes[..bytes.len() - 2];
        match EmbeddingStore::from_bytes(cut) {
            Err(Error::Corrupt { offset, .. }) => assert!(offset >= STORE_HEADER_LEN as u64),
            other => panic!("expected corruption error, got {other:?}"),
        }
        assert!(matches!(EmbeddingStore::from_bytes(&bytes[..10]), Err(Error::Format(_))));
    }

    #[test]
    fn trailing_bytes_and_bad_counts_are_rejected() {
        let mut bytes = sample().to_bytes();
        bytes.push(0);
        assert!(matches!(EmbeddingStore::from_bytes(&bytes), Err(Error::Corrupt { .. })));
        let mut bytes = sample().to_bytes();
        bytes[9] = 3; // claims three records
        assert!(matches!(EmbeddingStore::from_bytes(&bytes), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn duplicate_keys_and_wrong_width_rejected() {
        let mut s = sample();
        assert!(s.insert("a/image", Modality::Image, vec![0.0; 3]).is_err());
        assert!(matches!(
            s.insert("b", Modality::Image, vec![0.0; 2]),
            Err(Error::Shape { .. })
        ));
        assert!(s.vector("missing").is_err());
    }
}
