//! Named-tensor archive used for checkpoints and embedding dumps.
//!
//! Layout:
//!
//! ```text
//! magic "GEOLIDAR" | u32 LE header length | JSON header | f32 LE payload | u32 LE crc32
//! ```
//!
//! The header lists every tensor as `(name, shape, dtype, offset)` with the
//! byte offset relative to the start of the payload, followed by a free-form
//! config block, the schema version and the RNG seed. The checksum covers
//! every preceding byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};
use crate::model::{LidModel, ModelConfig};

pub const MAGIC: &[u8; 8] = b"GEOLIDAR";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    seed: u64,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// In-memory archive. Tensors are kept sorted by name so that equal contents
/// always serialize to equal bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub seed: u64,
    pub config: serde_json::Value,
    tensors: BTreeMap<String, Tensor<f32>>,
}

impl Archive {
    pub fn new(seed: u64, config: serde_json::Value) -> Self {
        Self {
            seed,
            config,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.insert(name.into(), t.cast());
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::NotFound(format!("tensor `{name}` in archive")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "f32".into(),
                    offset,
                };
                offset += 4 * t.len() as u64;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            schema_version: SCHEMA_VERSION,
            seed: self.seed,
            config: self.config.clone(),
            tensors: entries,
        })?;
        let header_len = u32::try_from(header.len())
            .map_err(|_| Error::Archive("header exceeds 4 GiB".into()))?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Archive(m.to_string());
        if bytes.len() < MAGIC.len() + 8 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(bad("checksum mismatch"));
        }
        let header_len = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes")) as usize;
        let payload_start = 12 + header_len;
        if payload_start > body.len() {
            return Err(bad("header runs past end of file"));
        }
        let header: Header = serde_json::from_slice(&body[12..payload_start])?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(Error::Archive(format!(
                "schema version {} (expected {SCHEMA_VERSION})",
                header.schema_version
            )));
        }
        let payload = &body[payload_start..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            if e.dtype != "f32" {
                return Err(Error::Archive(format!("unsupported dtype `{}`", e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * n;
            let raw = payload
                .get(start..end)
                .ok_or_else(|| Error::Archive(format!("tensor `{}` out of bounds", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(e.name, Tensor::new(e.shape, data)?);
        }
        Ok(Self {
            seed: header.seed,
            config: header.config,
            tensors,
        })
    }

    /// Writes through a temporary file and a rename so a crash never leaves
    /// a truncated archive under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Stores parameters under `param/`, running statistics under `buffer/`,
/// and the model configuration plus frozen-parameter list in the config
/// block under `model`.
pub fn model_to_archive<T: Real>(model: &LidModel<T>, seed: u64, extra: serde_json::Value) -> Result<Archive> {
    let frozen: Vec<&str> = model
        .params
        .iter()
        .filter(|(_, p)| !p.trainable)
        .map(|(n, _)| n)
        .collect();
    let config = serde_json::json!({
        "model": model.config,
        "frozen": frozen,
        "extra": extra,
    });
    let mut a = Archive::new(seed, config);
    for (name, p) in model.params.iter() {
        a.insert(format!("param/{name}"), &p.value);
    }
    for (name, b) in &model.buffers {
        a.insert(format!("buffer/{name}"), b);
    }
    Ok(a)
}

/// Rebuilds a model from [`model_to_archive`] output. The parameter layout is
/// regenerated from the stored configuration, then every value is replaced.
pub fn model_from_archive<T: Real>(a: &Archive) -> Result<LidModel<T>> {
    let config: ModelConfig = serde_json::from_value(
        a.config
            .get("model")
            .cloned()
            .ok_or_else(|| Error::Archive("config block has no model".into()))?,
    )?;
    let mut model = LidModel::<T>::new(config, a.seed)?;
    for (name, p) in model.params.iter_mut() {
        let t = a.get(&format!("param/{name}"))?;
        if t.shape() != p.value.shape() {
            return Err(Error::Archive(format!(
                "parameter `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t.cast();
    }
    for (name, b) in model.buffers.iter_mut() {
        let t = a.get(&format!("buffer/{name}"))?;
        if t.shape() != b.shape() {
            return Err(Error::Archive(format!("buffer `{name}` has shape {:?}", t.shape())));
        }
        *b = t.cast();
    }
    Ok(model)
}
