//! Binary checkpoint format.
//!
//! ```text
//! "MTNL"  u32 version
//! u32 len, metadata text (UTF-8)
//! u32 tensor count
//! per tensor: u32 name len, name, u32 rank, rank × u32 dims, f32 data
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"MTNL";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint file")]
    Magic { path: String },
    #[error("{path}: checkpoint version {found}, expected {VERSION}")]
    Version { path: String, found: u32 },
    #[error("{path}: corrupt checkpoint: {msg}")]
    Corrupt { path: String, msg: String },
    #[error("tensor {name}: {msg}")]
    Tensor { name: String, msg: String },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_store(metadata: String, store: &ParamStore<f32>) -> Self {
        let tensors = store
            .iter()
            .map(|(_, name, t)| (name.to_string(), Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("shape matches")))
            .collect();
        Checkpoint { metadata, tensors }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_bytes(&mut out, self.metadata.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::Magic { path: path.into() });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                path: path.into(),
                found: version,
            });
        }
        let metadata = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.corrupt("tensor size overflows"))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| r.corrupt("tensor size overflows"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(shape, data).map_err(|e| r.corrupt(&e.to_string()))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(r.corrupt("trailing bytes"));
        }
        Ok(Checkpoint { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Checkpoint::from_bytes(&bytes, &path.display().to_string())
    }

    /// Copies tensors into `store` by name. Every store tensor must be present
    /// with the same shape, and no extra tensors may appear.
    pub fn restore_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if self.tensors.len() != store.len() {
            let missing = store
                .iter()
                .map(|(_, n, _)| n.to_string())
                .find(|n| !self.tensors.iter().any(|(m, _)| m == n));
            let extra = self.tensors.iter().map(|(n, _)| n.clone()).find(|n| store.id(n).is_none());
            let (name, msg) = match (missing, extra) {
                (Some(n), _) => (n, "missing from checkpoint"),
                (_, Some(n)) => (n, "not part of the model"),
                _ => ("<all>".into(), "tensor count differs"),
            };
            return Err(CheckpointError::Tensor { name, msg: msg.into() });
        }
        for (name, t) in &self.tensors {
            let id = store.id(name).ok_or_else(|| CheckpointError::Tensor {
                name: name.clone(),
                msg: "not part of the model".into(),
            })?;
            if store.get(id).shape() != t.shape() {
                return Err(CheckpointError::Tensor {
                    name: name.clone(),
                    msg: format!("shape {:?} in checkpoint, model expects {:?}", t.shape(), store.get(id).shape()),
                });
            }
        }
        for (name, t) in &self.tensors {
            let id = store.id(name).expect("checked above");
            store.get_mut(id).data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, msg: &str) -> CheckpointError {
        CheckpointError::Corrupt {
            path: self.path.into(),
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.corrupt("truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.corrupt("invalid UTF-8"))
    }
}
