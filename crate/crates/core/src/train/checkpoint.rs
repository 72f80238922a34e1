//! Versioned binary checkpoints: a magic header, a JSON manifest and the
//! tensors as little-endian `f32` arrays.
//!
//! ```text
//! b"FLCKPT\0\0"  u32 version  u64 manifest_len  manifest (JSON)  data
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::config::TrainConfig;
use super::TrainState;

pub const MAGIC: &[u8; 8] = b"FLCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Param,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    /// Byte offset into the data section.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: TrainConfig,
    state: TrainState,
    adam_step: u64,
    tensors: Vec<TensorEntry>,
}

/// Full training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
    pub adam_step: u64,
    /// Parameters in store order.
    pub params: Vec<(String, Tensor<f32>)>,
    pub adam_m: Vec<Tensor<f32>>,
    pub adam_v: Vec<Tensor<f32>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut data = Vec::new();
        let mut tensors = Vec::new();
        let groups = [
            (Group::Param, self.params.iter().map(|(_, t)| t).collect::<Vec<_>>()),
            (Group::AdamM, self.adam_m.iter().collect()),
            (Group::AdamV, self.adam_v.iter().collect()),
        ];
        for (group, ts) in groups {
            for (t, (name, _)) in ts.into_iter().zip(&self.params) {
                tensors.push(TensorEntry {
                    name: name.clone(),
                    group,
                    shape: t.shape().to_vec(),
                    offset: data.len() as u64,
                });
                for v in t.data() {
                    data.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let manifest = Manifest {
            version: VERSION,
            config: self.config.clone(),
            state: self.state.clone(),
            adam_step: self.adam_step,
            tensors,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(20 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(20..20 + len).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(json)?;
        let data = &bytes[20 + len..];
        let mut params = Vec::new();
        let (mut adam_m, mut adam_v) = (Vec::new(), Vec::new());
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let raw = data
                .get(start..start + 4 * n)
                .ok_or_else(|| bad(&format!("tensor {} out of range", e.name)))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&e.shape, values)?;
            match e.group {
                Group::Param => params.push((e.name.clone(), t)),
                Group::AdamM => adam_m.push(t),
                Group::AdamV => adam_v.push(t),
            }
        }
        if adam_m.len() != params.len() || adam_v.len() != params.len() {
            return Err(bad("optimizer moments do not match parameters"));
        }
        Ok(Self {
            config: manifest.config,
            state: manifest.state,
            adam_step: manifest.adam_step,
            params,
            adam_m,
            adam_v,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // Write then rename so a crash never leaves a half-written file.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
