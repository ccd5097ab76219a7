use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{EncoderConfig, EncoderState};
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    /// Row-major.
    pub data: Vec<f32>,
}

/// JSON container: format version, model config, and named row-major
/// `f32` tensors. Heads beyond the encoder are stored as extra tensors with
/// their own name prefix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: EncoderConfig,
    pub params: Vec<TensorRecord>,
}

fn record(name: &str, t: &Array2<f64>) -> TensorRecord {
    TensorRecord {
        name: name.to_string(),
        shape: [t.nrows(), t.ncols()],
        data: t.iter().map(|&x| x as f32).collect(),
    }
}

impl Checkpoint {
    pub fn new<'a>(state: &EncoderState, extra: impl IntoIterator<Item = (String, &'a Array2<f64>)>) -> Self {
        let mut params: Vec<_> = state.params().into_iter().map(|(n, t)| record(&n, t)).collect();
        params.extend(extra.into_iter().map(|(n, t)| record(&n, t)));
        Checkpoint {
            format_version: FORMAT_VERSION,
            config: state.config.clone(),
            params,
        }
    }

    fn tensors(&self) -> Result<BTreeMap<&str, Array2<f64>>> {
        let mut out = BTreeMap::new();
        for r in &self.params {
            let data: Vec<f64> = r.data.iter().map(|&x| x as f64).collect();
            let t = Array2::from_shape_vec((r.shape[0], r.shape[1]), data)
                .map_err(|_| Error::Format(format!("tensor {} does not match its shape", r.name)))?;
            if out.insert(r.name.as_str(), t).is_some() {
                return Err(Error::Format(format!("duplicate tensor {}", r.name)));
            }
        }
        Ok(out)
    }

    /// Rebuilds the encoder; every encoder tensor must be present with the
    /// expected shape.
    pub fn state(&self) -> Result<EncoderState> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", self.format_version)));
        }
        let mut state = EncoderState::zeros(&self.config)?;
        let tensors = self.tensors()?;
        for (name, slot) in state.params_mut() {
            let t = tensors
                .get(name.as_str())
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
            if t.dim() != slot.dim() {
                return Err(Error::Format(format!("tensor {name} has shape {:?}, expected {:?}", t.dim(), slot.dim())));
            }
            slot.assign(t);
        }
        Ok(state)
    }

    /// A non-encoder tensor by name.
    pub fn extra(&self, name: &str) -> Result<Array2<f64>> {
        self.tensors()?
            .remove(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.iter().any(|r| r.name == name)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    atomic_write(path, serde_json::to_string(ckpt)?.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
