//! Versioned binary checkpoints shared by all three networks.
//!
//! Layout (little-endian):
//! `b"CTTS"`, `u32` format version, `u32` + UTF-8 kind tag, `u32` + JSON
//! metadata (the model config echo), `u32` parameter count, then per
//! parameter `u32` + UTF-8 name, `u32` rows, `u32` cols, `f64` values.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::autograd::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CTTS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("expected a {expected} checkpoint, found {found}")]
    Kind { expected: String, found: String },
    #[error("checkpoint metadata: {0}")]
    Meta(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub params: ParamStore,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Format("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Format("invalid UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn new<M: Serialize>(kind: &str, meta: &M, params: ParamStore) -> Self {
        let meta = serde_json::to_value(meta).expect("checkpoint metadata serializes");
        Self { kind: kind.to_string(), meta, params }
    }

    pub fn meta_as<M: DeserializeOwned>(&self) -> Result<M, CheckpointError> {
        serde_json::from_value(self.meta.clone()).map_err(|e| CheckpointError::Meta(e.to_string()))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), CheckpointError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(CheckpointError::Kind { expected: kind.into(), found: self.kind.clone() })
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_str(&mut out, &self.kind);
        put_str(&mut out, &serde_json::to_string(&self.meta).expect("json"));
        put_u32(&mut out, self.params.len() as u32);
        for (name, t) in self.params.iter() {
            put_str(&mut out, name);
            put_u32(&mut out, t.rows as u32);
            put_u32(&mut out, t.cols as u32);
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(4)? != MAGIC {
            return Err(CheckpointError::Format("bad magic".into()));
        }
        let version = c.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let kind = c.string()?;
        let meta = serde_json::from_str(&c.string()?).map_err(|e| CheckpointError::Meta(e.to_string()))?;
        let n = c.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = c.string()?;
            let rows = c.u32()? as usize;
            let cols = c.u32()? as usize;
            let raw = c.take(rows * cols * 8)?;
            let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            params.add(name, Tensor::from_vec(rows, cols, data));
        }
        if c.pos != bytes.len() {
            return Err(CheckpointError::Format("trailing bytes".into()));
        }
        Ok(Self { kind, meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CheckpointError::Io { path: path.display().to_string(), source: e })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io { path: path.display().to_string(), source: e })?;
        Self::from_bytes(&bytes)
    }
}
