//! Checkpoint container.
//!
//! Layout: the 8-byte magic `MTRCKPT1`, a little-endian `u64` header length,
//! a JSON header (configs, intention points, training state, tensor table),
//! then every tensor as little-endian `f32` in table order.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::optim::{AdamW, AdamWConfig};
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::intention::{IntentionRecord, IntentionTable};
use crate::model::MotionTransformer;
use crate::scene::VectorizeConfig;

const MAGIC: &[u8; 8] = b"MTRCKPT1";
const PARAM: &str = "param/";
const FIRST: &str = "adam_m/";
const SECOND: &str = "adam_v/";

/// Where training stopped when the checkpoint was written.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Number of completed epochs.
    pub epochs_done: usize,
    pub global_step: u64,
    pub optimizer_step: u64,
    pub best_val_min_ade: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    vectorize: VectorizeConfig,
    intentions: Vec<IntentionRecord>,
    train: Option<TrainState>,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub vectorize: VectorizeConfig,
    pub intentions: Vec<IntentionRecord>,
    pub train: Option<TrainState>,
    /// Model parameters and optional optimizer moments, keyed with the
    /// `param/`, `adam_m/` and `adam_v/` prefixes.
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn capture(
        model: &MotionTransformer,
        vectorize: &VectorizeConfig,
        intentions: &IntentionTable,
        train: Option<TrainState>,
        optimizer: Option<&AdamW>,
    ) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for (name, var) in model.params.iter() {
            tensors.insert(format!("{PARAM}{name}"), var.as_tensor().detach());
        }
        if let Some(opt) = optimizer {
            for (name, t) in &opt.first {
                tensors.insert(format!("{FIRST}{name}"), t.detach());
            }
            for (name, t) in &opt.second {
                tensors.insert(format!("{SECOND}{name}"), t.detach());
            }
        }
        Ok(Self {
            model: model.config.clone(),
            vectorize: vectorize.clone(),
            intentions: intentions.records(),
            train,
            tensors,
        })
    }

    fn prefixed(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn intention_table(&self) -> Result<IntentionTable> {
        IntentionTable::from_records(self.intentions.clone())
    }

    /// Rebuilds the network and loads its parameters.
    pub fn build_model(&self) -> Result<MotionTransformer> {
        let model = MotionTransformer::new(&self.model, 0)?;
        model.params.assign(&self.prefixed(PARAM))?;
        Ok(model)
    }

    /// Optimizer state, when the checkpoint carries one.
    pub fn restore_optimizer(&self, config: AdamWConfig) -> Option<AdamW> {
        let first = self.prefixed(FIRST);
        if first.is_empty() {
            return None;
        }
        Some(AdamW {
            config,
            step: self.train.as_ref().map_or(0, |t| t.optimizer_step),
            first,
            second: self.prefixed(SECOND),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut payload: Vec<u8> = Vec::new();
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.dims().to_vec(),
            });
            let values: Vec<f32> = t.flatten_all()?.to_vec1()?;
            for v in values {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            model: self.model.clone(),
            vectorize: self.vectorize.clone(),
            intentions: self.intentions.clone(),
            train: self.train.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(16..16 + len)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut offset = 16 + len;
        let mut tensors = BTreeMap::new();
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let raw = bytes
                .get(offset..offset + 4 * n)
                .ok_or_else(|| Error::Checkpoint(format!("truncated tensor `{}`", entry.name)))?;
            offset += 4 * n;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(entry.name, Tensor::from_vec(values, entry.shape, &Device::Cpu)?);
        }
        if offset != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after tensors".into()));
        }
        Ok(Self {
            model: header.model,
            vectorize: header.vectorize,
            intentions: header.intentions,
            train: header.train,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| {
            Error::Checkpoint(format!("cannot read {}: {e}", path.as_ref().display()))
        })?;
        Self::from_bytes(&bytes)
    }
}
