//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "SSACKPT\0"
//! version    u32      1
//! manifest   u32 length, then that many bytes of UTF-8 TOML
//! count      u32      number of tensors
//! per tensor:
//!   name     u32 length, then UTF-8 bytes
//!   ndim     u32
//!   dims     ndim × u32
//!   data     product(dims) × f32
//! ```
//!
//! The manifest has a `kind` key (`"rpn"` or `"rcnn"`) and a `[network]` table
//! holding the full network configuration. Tensors appear in parameter
//! registration order. Trailing bytes are an error.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::NetworkConfig;
use crate::data::write_file;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"SSACKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    Rpn,
    Rcnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: NetKind,
    pub network: NetworkConfig,
}

/// A decoded checkpoint: its manifest plus named tensors in file order.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(manifest: &Manifest, store: &ParamStore<f32>) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(store.numel() * 4 + 4096);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let text = toml::to_string(manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    put_u32(&mut buf, text.len())?;
    buf.extend_from_slice(text.as_bytes());
    put_u32(&mut buf, store.len())?;
    for (_, p) in store.iter() {
        put_u32(&mut buf, p.name.len())?;
        buf.extend_from_slice(p.name.as_bytes());
        put_u32(&mut buf, p.tensor.shape().len())?;
        for &d in p.tensor.shape() {
            put_u32(&mut buf, d)?;
        }
        for v in p.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let text = r.string("manifest")?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let ndim = r.u32("ndim")?;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32("dims")?);
        }
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Checkpoint(format!("{name}: dimensions overflow")))?;
        let raw = r.take(numel.checked_mul(4).unwrap_or(usize::MAX), &name)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { manifest, tensors })
}

pub fn save(path: &Path, manifest: &Manifest, store: &ParamStore<f32>) -> Result<()> {
    write_file(path, &encode(manifest, store)?)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

impl Checkpoint {
    /// Writes every tensor into `store`, which must hold exactly the same
    /// names and shapes. The first disagreement is reported by layer name.
    pub fn restore_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        for (name, t) in &self.tensors {
            let id = store.id(name).ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            let p = store.get_mut(id);
            if p.tensor.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: network expects {:?}, checkpoint has {:?}",
                    p.tensor.shape(),
                    t.shape()
                )));
            }
            p.tensor.data_mut().copy_from_slice(t.data());
        }
        if let Some((_, missing)) = store.iter().find(|(_, p)| !self.tensors.iter().any(|(n, _)| *n == p.name)) {
            return Err(Error::Checkpoint(format!("checkpoint lacks tensor {}", missing.name)));
        }
        Ok(())
    }

    pub fn to_store(&self) -> Result<ParamStore<f32>> {
        let mut s = ParamStore::new();
        for (n, t) in &self.tensors {
            s.insert(n.clone(), t.clone())?;
        }
        Ok(s)
    }
}
