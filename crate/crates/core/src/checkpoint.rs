//! Versioned single-file archive for weights and run metadata.
//!
//! Layout: magic `CAPSLDM\0`, `u32` format version, `u64` header length, JSON
//! header, little-endian `f32` payload in header order, then the SHA-256 of
//! everything before it.

use std::fs;
use std::io::Write;
use std::path::Path;

use capsule_nn::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"CAPSLDM\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("incompatible checkpoint: {0}")]
    Version(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// In-memory archive contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

impl Archive {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            meta,
            tensors: Vec::new(),
        }
    }

    /// Append every tensor of `store` under `prefix/`.
    pub fn put_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (name, t) in store.iter() {
            self.tensors.push((format!("{prefix}/{name}"), t.clone()));
        }
    }

    pub fn put(&mut self, name: &str, t: Tensor<f32>) {
        self.tensors.push((name.to_string(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Overwrite `store` with the tensors saved under `prefix/`, requiring the
    /// same names and shapes.
    pub fn fill_store(
        &self,
        prefix: &str,
        store: &mut ParamStore<f32>,
    ) -> Result<(), CheckpointError> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let key = format!("{prefix}/{}", store.name(id));
            let t = self
                .get(&key)
                .ok_or_else(|| CheckpointError::Version(format!("missing tensor {key}")))?;
            if t.shape() != store.get(id).shape() {
                return Err(CheckpointError::Version(format!(
                    "tensor {key} has shape {:?}, model expects {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = t.clone();
        }
        let expected = store.len();
        let stored = self
            .tensors
            .iter()
            .filter(|(n, _)| n.starts_with(&format!("{prefix}/")))
            .count();
        if stored != expected {
            return Err(CheckpointError::Version(format!(
                "{prefix}: archive holds {stored} tensors, model has {expected}"
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let hjson = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&hjson);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let fmt = |m: &str| CheckpointError::Format(m.to_string());
        if bytes.len() < MAGIC.len() + 12 + 32 {
            return Err(fmt("file too short"));
        }
        if &bytes[..8] != MAGIC {
            return Err(fmt("bad magic"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(fmt("checksum mismatch (truncated or corrupted)"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let hend = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| fmt("header length out of range"))?;
        let header: Header =
            serde_json::from_slice(&body[20..hend]).map_err(|e| fmt(&format!("header: {e}")))?;
        let mut pos = hend;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let end = pos + 4 * n;
            if end > body.len() {
                return Err(fmt("payload shorter than header declares"));
            }
            let data = body[pos..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name, Tensor::from_vec(&e.shape, data)));
            pos = end;
        }
        if pos != body.len() {
            return Err(fmt("trailing bytes after payload"));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    /// Write to a sibling temp file then rename, so readers never see a
    /// partial archive.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Load and require a particular kind tag.
    pub fn load_kind(path: &Path, kind: &str) -> Result<Self, CheckpointError> {
        let a = Self::load(path)?;
        if a.kind != kind {
            return Err(CheckpointError::Version(format!(
                "{} is a '{}' checkpoint, expected '{kind}'",
                path.display(),
                a.kind
            )));
        }
        Ok(a)
    }
}
