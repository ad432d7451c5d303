//! Checkpoint files: one line of JSON manifest, then the tensors as
//! little-endian `f32` in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ModelConfig, ParamStore};
use crate::diffcore::Array;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "cmflow-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

/// Optimiser progress carried for `--resume`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResumeInfo {
    pub epochs_done: usize,
    pub step: usize,
    pub adam_t: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub resume: Option<ResumeInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub info: ResumeInfo,
    pub m: Vec<Array>,
    pub v: Vec<Array>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub train_state: Option<TrainState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let names = self.params.names();
        let mut tensors: Vec<(String, &Array)> =
            names.iter().cloned().zip(self.params.arrays()).collect();
        if let Some(ts) = &self.train_state {
            if ts.m.len() != names.len() || ts.v.len() != names.len() {
                return Err(Error::ShapeMismatch(
                    "optimiser state does not match the parameters".into(),
                ));
            }
            tensors.extend(names.iter().map(|n| format!("adam.m/{n}")).zip(&ts.m));
            tensors.extend(names.iter().map(|n| format!("adam.v/{n}")).zip(&ts.v));
        }
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self.params.config.clone(),
            tensors: tensors
                .iter()
                .map(|(n, a)| TensorEntry {
                    name: n.clone(),
                    shape: a.shape().to_vec(),
                    dtype: "f32".into(),
                })
                .collect(),
            resume: self.train_state.as_ref().map(|t| t.info),
        };
        let mut out = serde_json::to_vec(&manifest)?;
        out.push(b'\n');
        for (_, a) in &tensors {
            for &x in a.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("checkpoint has no manifest line".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[..split])?;
        if manifest.format != CHECKPOINT_FORMAT || manifest.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{}",
                manifest.format, manifest.version
            )));
        }
        let mut payload = &bytes[split + 1..];
        let mut names = Vec::new();
        let mut arrays = Vec::new();
        for t in &manifest.tensors {
            if t.dtype != "f32" {
                return Err(Error::Format(format!(
                    "tensor {} has unsupported dtype {}",
                    t.name, t.dtype
                )));
            }
            let n: usize = t.shape.iter().product();
            if payload.len() < 4 * n {
                return Err(Error::Format(format!(
                    "checkpoint truncated in tensor {}",
                    t.name
                )));
            }
            let data = payload[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            payload = &payload[4 * n..];
            names.push(t.name.clone());
            arrays.push(Array::new(t.shape.clone(), data)?);
        }
        if !payload.is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last tensor",
                payload.len()
            )));
        }
        let p = manifest.model.arch().layout().len();
        let train_state = match manifest.resume {
            Some(info) => {
                if arrays.len() != 3 * p {
                    return Err(Error::Format(
                        "resume state needs two moment tensors per parameter".into(),
                    ));
                }
                let v = arrays.split_off(2 * p);
                let m = arrays.split_off(p);
                for (i, name) in names[..p].iter().enumerate() {
                    if names[p + i] != format!("adam.m/{name}")
                        || names[2 * p + i] != format!("adam.v/{name}")
                    {
                        return Err(Error::Format(format!(
                            "optimiser tensors out of order at {name}"
                        )));
                    }
                }
                Some(TrainState { info, m, v })
            }
            None => None,
        };
        names.truncate(p);
        let params = ParamStore::from_parts(manifest.model, names, arrays)?;
        Ok(Self {
            params,
            train_state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
