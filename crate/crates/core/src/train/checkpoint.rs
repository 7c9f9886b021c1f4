//! Checkpoint file: magic, a JSON metadata block, then named f64 tensors.
//!
//! ```text
//! "TMCK1" | u32 meta_len | meta JSON | u32 count |
//!   count × (u32 name_len | name | u32 ndim | ndim × u64 dim | f64 values)
//! ```
//! All integers and floats are little-endian.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"TMCK1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// 1-based epoch the snapshot was taken after.
    pub epoch: usize,
    pub val_auroc: Option<f64>,
    pub labels: Vec<String>,
    pub model: ModelConfig,
    /// Free-form run settings carried along for evaluation.
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn capture(meta: CheckpointMeta, store: &ParamStore) -> Self {
        Checkpoint {
            meta,
            params: store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    /// Copy the snapshot into a store with the same names and shapes.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::contract(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (p, (name, value)) in store.iter_mut().zip(&self.params) {
            if &p.name != name || p.value.shape() != value.shape() {
                return Err(Error::contract(format!(
                    "checkpoint parameter `{name}` {:?} does not match `{}` {:?}",
                    value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = value.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&len_u32(meta.len())?.to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&len_u32(self.params.len())?.to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&len_u32(name.len())?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&len_u32(t.shape().len())?.to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let mut r = Reader {
            bytes,
            pos: CHECKPOINT_MAGIC.len(),
        };
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| corrupt(at, "parameter name is not UTF-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let at = r.pos;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| corrupt(at, "tensor size overflows"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            params.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(corrupt(r.pos, "trailing bytes after last tensor"));
        }
        Ok(Checkpoint { meta, params })
    }

    /// Write through a temporary file in the same directory, then rename,
    /// so a crash never leaves a partial checkpoint under `path`.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Write `bytes` to `path` via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("`{}` is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::contract(format!("length {n} does not fit in u32")))
}

fn corrupt(offset: usize, msg: &str) -> Error {
    Error::Corrupt {
        offset: offset as u64,
        msg: msg.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt(self.pos, "truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
