//! Self-describing checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset 0   8 bytes   magic "PFCKPT01"
//! offset 8   u64       header length H in bytes
//! offset 16  H bytes   UTF-8 JSON header
//! offset 16+H          array payload: f32 values, concatenated
//! ```
//!
//! The header holds the model and training configuration, the pianist
//! vocabulary, the loss-weight, early-stopping and optimizer scalars, and a
//! directory of named arrays with shapes and element offsets into the
//! payload. Arrays are the model parameters (`param/<name>`) followed by the
//! Adam first (`adam.m/<name>`) and second (`adam.v/<name>`) moments.

use std::path::Path;

use pianoform_numerics::{AdamState, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelConfig, ModelError, ModelParams};
use crate::training::{EarlyStopping, LossWeights, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"PFCKPT01";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint header: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Complete training snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Pianist labels, indexed by one-hot position.
    pub pianists: Vec<String>,
    pub params: ModelParams<f32>,
    pub state: TrainState,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdamScalars {
    learning_rate: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: u32,
    dtype: String,
    model: ModelConfig,
    train: TrainConfig,
    pianists: Vec<String>,
    epoch: usize,
    loss_weights: LossWeights,
    initial_losses: Option<[f64; 3]>,
    early_stopping: EarlyStopping,
    adam: AdamScalars,
    arrays: Vec<ArrayEntry>,
}

impl Checkpoint {
    /// Model rebuilt from the stored configuration and parameters.
    pub fn to_model(&self) -> Result<Model<f32>, CheckpointError> {
        Ok(Model::from_params(self.model.clone(), self.params.clone())?)
    }

    pub fn pianist_index(&self, label: &str) -> Option<usize> {
        self.pianists.iter().position(|p| p == label)
    }

    /// Best validation loss recorded so far.
    pub fn best_validation(&self) -> Option<f64> {
        self.state.early.best
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let adam = &self.state.adam;
        let groups: [(&str, &[Tensor<f32>]); 3] = [
            ("param", &self.params.tensors),
            ("adam.m", &adam.first_moment),
            ("adam.v", &adam.second_moment),
        ];
        let mut arrays = Vec::new();
        let mut offset = 0;
        for (prefix, tensors) in groups {
            if tensors.len() != self.params.names.len() {
                return Err(CheckpointError::Format(format!(
                    "{prefix}: {} arrays for {} parameters",
                    tensors.len(),
                    self.params.names.len()
                )));
            }
            for (name, t) in self.params.names.iter().zip(tensors) {
                arrays.push(ArrayEntry {
                    name: format!("{prefix}/{name}"),
                    shape: t.shape().to_vec(),
                    offset,
                    len: t.len(),
                });
                offset += t.len();
            }
        }
        let header = Header {
            format: FORMAT_VERSION,
            dtype: "f32".into(),
            model: self.model.clone(),
            train: self.train.clone(),
            pianists: self.pianists.clone(),
            epoch: self.state.epoch,
            loss_weights: self.state.weights,
            initial_losses: self.state.initial_losses,
            early_stopping: self.state.early.clone(),
            adam: AdamScalars {
                learning_rate: adam.learning_rate,
                weight_decay: adam.weight_decay,
                beta1: adam.beta1,
                beta2: adam.beta2,
                epsilon: adam.epsilon,
                step: adam.step,
            },
            arrays,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, tensors) in groups {
            for t in tensors {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let bad = |m: &str| CheckpointError::Format(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let payload_start = 16usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad("header runs past end of file"))?;
        let header: Header = serde_json::from_slice(&bytes[16..payload_start])?;
        if header.format != FORMAT_VERSION || header.dtype != "f32" {
            return Err(bad(&format!("unsupported format {} / dtype {}", header.format, header.dtype)));
        }
        let payload = &bytes[payload_start..];
        let total: usize = header.arrays.iter().map(|a| a.len).sum();
        if payload.len() != total * 4 {
            return Err(bad(&format!("payload has {} bytes, directory needs {}", payload.len(), total * 4)));
        }

        let count = header.arrays.len() / 3;
        if header.arrays.len() != count * 3 {
            return Err(bad("array directory is not three equal groups"));
        }
        let mut names = Vec::with_capacity(count);
        let mut groups: [Vec<Tensor<f32>>; 3] = Default::default();
        for (i, entry) in header.arrays.iter().enumerate() {
            let (group, prefix) = match i / count {
                0 => (0, "param/"),
                1 => (1, "adam.m/"),
                _ => (2, "adam.v/"),
            };
            let name = entry
                .name
                .strip_prefix(prefix)
                .ok_or_else(|| bad(&format!("array {} out of order", entry.name)))?;
            if group == 0 {
                names.push(name.to_string());
            } else if names[i % count] != name {
                return Err(bad(&format!("array {} does not match {}", entry.name, names[i % count])));
            }
            let end = entry.offset.checked_add(entry.len).filter(|&e| e <= total);
            let Some(end) = end else {
                return Err(bad(&format!("array {} outside payload", entry.name)));
            };
            let data = payload[entry.offset * 4..end * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(entry.shape.clone(), data)
                .map_err(|e| bad(&format!("array {}: {e}", entry.name)))?;
            groups[group].push(t);
        }
        let [params, first_moment, second_moment] = groups;
        let params = ModelParams { names, tensors: params };
        Model::from_params(header.model.clone(), params.clone())?;

        let a = header.adam;
        Ok(Checkpoint {
            model: header.model,
            train: header.train,
            pianists: header.pianists,
            params,
            state: TrainState {
                epoch: header.epoch,
                weights: header.loss_weights,
                initial_losses: header.initial_losses,
                adam: AdamState {
                    learning_rate: a.learning_rate,
                    weight_decay: a.weight_decay,
                    beta1: a.beta1,
                    beta2: a.beta2,
                    epsilon: a.epsilon,
                    step: a.step,
                    first_moment,
                    second_moment,
                },
                early: header.early_stopping,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()?).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
