//! Binary checkpoint format, little endian:
//!
//! ```text
//! "ATSS" | u32 version | u32 header length | header JSON
//! repeated until EOF:
//!   u32 name length | name bytes | u32 rank | rank x u32 dims | f32 payload
//! ```
//!
//! The header JSON is `{"config": ModelConfig, "meta": CheckpointMeta}`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::ModelError;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ATSS";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training-derived facts stored next to the parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointMeta {
    /// Leave-one-out log-likelihood below which an object counts as anomalous.
    pub anomaly_threshold: Option<f64>,
    /// Mean per-scene count of each category in the training set.
    pub category_frequency: Option<Vec<f64>>,
    /// Room bounds used when a request carries only a floor polygon.
    pub default_bounds: Option<[f64; 6]>,
    pub room_type: Option<String>,
    pub iterations: usize,
    pub best_val_nll: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: CheckpointMeta,
}

/// A trained model plus its metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub meta: CheckpointMeta,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ModelError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn push_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

impl Checkpoint {
    /// Copies the model's category frequencies into the metadata.
    pub fn new(model: Model<f32>, mut meta: CheckpointMeta) -> Self {
        if let Some(f) = model.category_frequency() {
            meta.category_frequency = Some(f.to_vec());
        }
        Self { model, meta }
    }

    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.model.config().clone(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(self.model.parameter_count() * 4 + json.len() + 64);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        push_u32(&mut out, CHECKPOINT_VERSION as usize);
        push_u32(&mut out, json.len());
        out.extend_from_slice(&json);
        for (name, t) in self.model.names().iter().zip(self.model.params()) {
            push_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            push_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                push_u32(&mut out, d);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(ModelError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(len)?).map_err(|e| ModelError::Checkpoint(format!("header: {e}")))?;
        let mut tensors = HashMap::new();
        while !r.done() {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| ModelError::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let count: usize = shape.iter().product();
            let payload = r.take(
                count
                    .checked_mul(4)
                    .ok_or_else(|| ModelError::Checkpoint("tensor too large".into()))?,
            )?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(ModelError::Checkpoint(format!("duplicate tensor {name}")));
            }
        }
        let mut model = Model::from_named(header.config, tensors)?;
        model.set_category_frequency(header.meta.category_frequency.clone());
        Ok(Self {
            model,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
