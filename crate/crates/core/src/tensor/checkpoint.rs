//! Versioned parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "KGPCKPT\0"
//! version    u32
//! checksum   32 bytes  SHA-256 of body
//! body_len   u64
//! body:
//!   meta_count u32, then (key_len u32, key, value_len u32, value)*
//!   entry_count u32, then per entry:
//!     name_len u32, name, frozen u8, ndim u32, dims u64*ndim, values f64*prod(dims)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::param::ParamStore;
use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"KGPCKPT\0";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub frozen: bool,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        Self::from_store_filtered(store, |_| true)
    }

    pub fn from_store_filtered(store: &ParamStore, keep: impl Fn(&str) -> bool) -> Self {
        let entries = store
            .iter()
            .filter(|(_, p)| keep(&p.name))
            .map(|(_, p)| CheckpointEntry {
                name: p.name.clone(),
                frozen: p.frozen,
                value: p.value.clone(),
            })
            .collect();
        Self {
            meta: BTreeMap::new(),
            entries,
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    pub fn get(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Copies every entry into the same-named parameter of `store`, including frozen flags.
    /// Unknown names or shape mismatches are errors.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        for e in &self.entries {
            let id = store
                .id(&e.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", e.name)))?;
            let p = store.get_mut(id);
            if p.value.shape() != e.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?} in checkpoint but {:?} in model",
                    e.name,
                    e.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = e.value.clone();
            p.frozen = e.frozen;
            p.grad = None;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();
        put_u32(&mut body, self.meta.len() as u32);
        for (k, v) in &self.meta {
            put_str(&mut body, k);
            put_str(&mut body, v);
        }
        put_u32(&mut body, self.entries.len() as u32);
        for e in &self.entries {
            put_str(&mut body, &e.name);
            body.push(u8::from(e.frozen));
            put_u32(&mut body, e.value.shape().len() as u32);
            for &d in e.value.shape() {
                body.extend_from_slice(&(d as u64).to_le_bytes());
            }
            body.extend_from_slice(&e.value.to_le_bytes());
        }
        let mut out = Vec::with_capacity(body.len() + 52);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        out.extend_from_slice(&Sha256::digest(&body));
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(&body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let checksum = r.take(32)?.to_vec();
        let len = r.u64()? as usize;
        let body = r.take(len)?;
        if Sha256::digest(body).as_slice() != checksum.as_slice() {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            meta.insert(k, v);
        }
        let count = r.u32()?;
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = r.string()?;
            let frozen = r.take(1)?[0] != 0;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            entries.push(CheckpointEntry {
                name,
                frozen,
                value: Tensor::new(shape, data)?,
            });
        }
        Ok(Self { meta, entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated container".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-UTF-8 string".into()))
    }
}
