//! Named-array checkpoint archive.
//!
//! ```text
//! "NOWCKPT\0"              8-byte magic
//! version                  u32 little endian
//! header_len               u64 little endian
//! header                   JSON: {model_config, arrays: [{name, shape, offset, len}],
//!                                 meta, payload_sha256}
//! payload                  little-endian f32 values, arrays back to back
//! ```
//!
//! Model weights live under `model.<parameter name>`; trainers add their own
//! arrays (optimizer moments, best weights) and free-form `meta`. The archive
//! is written to a temporary file and renamed, and reads verify the payload
//! hash before anything is returned.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, NowcastModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"NOWCKPT\0";
const MODEL_PREFIX: &str = "model.";

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub model_config: ModelConfig,
    pub arrays: Vec<ArchiveArray>,
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayMeta {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model_config: ModelConfig,
    arrays: Vec<ArrayMeta>,
    meta: serde_json::Value,
    payload_sha256: String,
}

impl Archive {
    pub fn from_model(model: &NowcastModel<f32>) -> Self {
        let mut archive = Archive {
            model_config: model.config().clone(),
            arrays: Vec::new(),
            meta: serde_json::Value::Null,
        };
        archive.push_params(MODEL_PREFIX, model);
        archive
    }

    /// Adds every parameter of `model` under `prefix`.
    pub fn push_params(&mut self, prefix: &str, model: &NowcastModel<f32>) {
        let store = model.params();
        for e in store.entries() {
            self.arrays.push(ArchiveArray {
                name: format!("{prefix}{}", e.name),
                shape: e.shape.clone(),
                data: store.values()[e.offset..e.offset + e.len].to_vec(),
            });
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        self.arrays.push(ArchiveArray {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&ArchiveArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn to_model(&self) -> Result<NowcastModel<f32>> {
        self.params_to_model(MODEL_PREFIX)
    }

    /// Rebuilds a model from the arrays stored under `prefix`.
    pub fn params_to_model(&self, prefix: &str) -> Result<NowcastModel<f32>> {
        let mut model = NowcastModel::<f32>::new(self.model_config.clone())?;
        let mut values = vec![0.0f32; model.parameter_count()];
        for e in model.params().entries() {
            let name = format!("{prefix}{}", e.name);
            let arr = self
                .get(&name)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("missing array `{name}`")))?;
            if arr.shape != e.shape {
                return Err(Error::CorruptCheckpoint(format!(
                    "array `{name}` has shape {:?}, model expects {:?}",
                    arr.shape, e.shape
                )));
            }
            values[e.offset..e.offset + e.len].copy_from_slice(&arr.data);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::CorruptCheckpoint("non-finite parameter values".into()));
        }
        model.params_mut().load_values(&values);
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut arrays = Vec::with_capacity(self.arrays.len());
        let mut offset = 0;
        for a in &self.arrays {
            for v in &a.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            arrays.push(ArrayMeta {
                name: a.name.clone(),
                shape: a.shape.clone(),
                offset,
                len: a.data.len(),
            });
            offset += a.data.len();
        }
        let header = Header {
            model_config: self.model_config.clone(),
            arrays,
            meta: self.meta.clone(),
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::CorruptCheckpoint("missing checkpoint magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_bytes = bytes
            .get(20..20usize.saturating_add(header_len))
            .ok_or_else(|| Error::CorruptCheckpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(header_bytes)
            .map_err(|e| Error::CorruptCheckpoint(format!("unreadable header: {e}")))?;
        let payload = &bytes[20 + header_len..];
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(Error::CorruptCheckpoint("payload hash mismatch".into()));
        }
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for m in header.arrays {
            if m.shape.iter().product::<usize>() != m.len {
                return Err(Error::CorruptCheckpoint(format!("array `{}` length/shape disagree", m.name)));
            }
            let range = m.offset * 4..(m.offset + m.len) * 4;
            let raw = payload
                .get(range)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("array `{}` out of bounds", m.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            arrays.push(ArchiveArray {
                name: m.name,
                shape: m.shape,
                data,
            });
        }
        Ok(Archive {
            model_config: header.model_config,
            arrays,
            meta: header.meta,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_model(model: &NowcastModel<f32>, path: &Path) -> Result<()> {
    Archive::from_model(model).write(path)
}

pub fn load_model(path: &Path) -> Result<NowcastModel<f32>> {
    Archive::read(path)?.to_model()
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
