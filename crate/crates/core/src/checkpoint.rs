//! Named float32 tensor container with a JSON manifest.
//!
//! Layout: `MOFSCKPT`, version byte, u32-LE manifest length, manifest JSON,
//! u32-LE tensor count, then per tensor: u32 name length, UTF-8 name,
//! u32 rows, u32 cols, `rows·cols` little-endian f32 values.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{LoadError, MofsError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MOFSCKPT";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(manifest: serde_json::Value) -> Self {
        Self { manifest, tensors: BTreeMap::new() }
    }

    pub fn from_store(store: &ParamStore, manifest: serde_json::Value) -> Self {
        let tensors = store.iter_sorted().map(|(n, t)| (n.to_string(), t.clone())).collect();
        Self { manifest, tensors }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    /// Copies every tensor whose name starts with `prefix` into `store`.
    /// Names missing from the store or with the wrong shape are errors.
    pub fn load_into(&self, store: &mut ParamStore, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (name, t) in self.tensors.iter().filter(|(k, _)| k.starts_with(prefix)) {
            let id = store
                .id(name)
                .ok_or_else(|| MofsError::Config(format!("checkpoint tensor {name} has no matching parameter")))?;
            if store.get(id).shape() != t.shape() {
                return Err(MofsError::Shape(format!(
                    "{name}: checkpoint {:?} vs model {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            store.set(id, t.clone());
            n += 1;
        }
        Ok(n)
    }

    /// Overwrites every parameter in `store`; each must be present with its shape.
    /// Tensors without a matching parameter are left alone.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let t = self.tensors.get(&name).ok_or_else(|| MofsError::Config(format!("checkpoint lacks {name}")))?;
            if t.shape() != store.get(id).shape() {
                return Err(MofsError::Shape(format!("{name}: checkpoint {:?} vs model {:?}", t.shape(), store.get(id).shape())));
            }
            store.set(id, t.clone());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            out.extend(t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(LoadError::BadMagic { expected: "MOFSCKPT".into(), found: magic.to_vec() }.into());
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(LoadError::UnsupportedVersion(version).into());
        }
        let mlen = r.u32()? as usize;
        let manifest = serde_json::from_slice(r.take(mlen)?).map_err(|e| LoadError::Header(e.to_string()))?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|e| LoadError::Header(e.to_string()))?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let len = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| LoadError::Header(format!("tensor {name} is too large")))?;
            let data = r
                .take(len)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            tensors.insert(name, Tensor::new(rows, cols, data));
        }
        if r.pos != bytes.len() {
            return Err(LoadError::ShapeMismatch { expected: r.pos, found: bytes.len() }.into());
        }
        Ok(Self { manifest, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Hex SHA-256 of the serialised form.
    pub fn digest(&self) -> String {
        Sha256::digest(self.to_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(LoadError::Truncated { needed: self.pos.saturating_add(n), found: self.bytes.len() }.into()),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
