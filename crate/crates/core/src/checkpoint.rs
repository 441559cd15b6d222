//! Checkpoint files.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "GPTC"
//! 4       1     format version (1)
//! 5       8     header length L, u64 little-endian
//! 13      L     UTF-8 JSON header
//! 13+L    ...   payload: one GPTT tensor per manifest entry
//! ```
//!
//! The header holds the network and training configs, the step counter,
//! the sampler RNG position and a manifest of tensors. Each manifest entry
//! names a tensor, gives its role (`trainable`, `buffer`, `adam_m`,
//! `adam_v`), its dims and the byte range of its GPTT encoding relative to
//! the start of the payload. Values are stored as f32.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, NetworkConfig};
use crate::params::{ParamKind, ParamSet};
use crate::tensor::{decode_gptt, encode_gptt, RawTensor, Scalar, Tensor};
use crate::training::{AdamState, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GPTC";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Position of a seeded ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Word position as a decimal string (the value is a `u128`).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        RngState {
            seed,
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Data(format!("bad rng word position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Trainable,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub role: TensorRole,
    pub dims: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u8,
    config: NetworkConfig,
    train: Option<TrainConfig>,
    step: u64,
    rng: Option<RngState>,
    adam_step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub train: Option<TrainConfig>,
    pub step: u64,
    pub rng: Option<RngState>,
    pub params: ParamSet<f32>,
    pub adam: Option<AdamState<f32>>,
}

impl Checkpoint {
    /// A checkpoint holding only model weights.
    pub fn from_network<T: Scalar>(net: &Network<T>) -> Self {
        Checkpoint {
            config: net.config.clone(),
            train: None,
            step: 0,
            rng: None,
            params: net.params.cast(),
            adam: None,
        }
    }

    pub fn network<T: Scalar>(&self) -> Result<Network<T>> {
        Network::from_parts(self.config.clone(), self.params.cast())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        let mut add = |name: &str, role, t: &Tensor<f32>| -> Result<()> {
            let raw = RawTensor::from_tensor(t);
            let bytes = encode_gptt(&raw)?;
            tensors.push(TensorEntry {
                name: name.to_string(),
                role,
                dims: raw.dims,
                offset: payload.len(),
                len: bytes.len(),
            });
            payload.extend_from_slice(&bytes);
            Ok(())
        };
        for (name, t, kind) in self.params.iter() {
            let role = match kind {
                ParamKind::Trainable => TensorRole::Trainable,
                ParamKind::Buffer => TensorRole::Buffer,
            };
            add(name, role, t)?;
        }
        if let Some(adam) = &self.adam {
            for (name, m) in &adam.m {
                add(name, TensorRole::AdamM, m)?;
            }
            for (name, v) in &adam.v {
                add(name, TensorRole::AdamV, v)?;
            }
        }
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            train: self.train.clone(),
            step: self.step,
            rng: self.rng.clone(),
            adam_step: self.adam.as_ref().map(|a| a.step),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(13 + json.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, msg: String| Error::Format {
            what: "checkpoint",
            offset,
            msg,
        };
        if bytes.len() < 13 {
            return Err(fail(bytes.len(), "truncated preamble".into()));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fail(0, "bad magic".into()));
        }
        if bytes[4] != CHECKPOINT_VERSION {
            return Err(fail(4, format!("unsupported version {}", bytes[4])));
        }
        let hlen = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let json = bytes
            .get(13..13usize.saturating_add(hlen))
            .ok_or_else(|| fail(bytes.len(), format!("truncated header of {hlen} bytes")))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| fail(13, format!("header: {e}")))?;
        let base = 13 + hlen;
        let payload = &bytes[base..];

        let mut params = ParamSet::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        let mut end = 0;
        for e in &header.tensors {
            let blob = payload
                .get(e.offset..e.offset.saturating_add(e.len))
                .ok_or_else(|| fail(base + e.offset, format!("tensor {} out of range", e.name)))?;
            let (raw, used) =
                decode_gptt(blob).map_err(|err| fail(base + e.offset, format!("{}: {err}", e.name)))?;
            if used != e.len || raw.dims != e.dims {
                return Err(fail(
                    base + e.offset,
                    format!("tensor {} manifest mismatch", e.name),
                ));
            }
            let t = raw.to_tensor()?;
            match e.role {
                TensorRole::Trainable => params.insert(e.name.clone(), t, ParamKind::Trainable),
                TensorRole::Buffer => params.insert(e.name.clone(), t, ParamKind::Buffer),
                TensorRole::AdamM => {
                    m.insert(e.name.clone(), t);
                }
                TensorRole::AdamV => {
                    v.insert(e.name.clone(), t);
                }
            }
            end = end.max(e.offset + e.len);
        }
        if end != payload.len() {
            return Err(fail(
                base + end,
                format!("{} unreferenced bytes", payload.len() - end),
            ));
        }
        let adam = header.adam_step.map(|step| AdamState { step, m, v });
        Ok(Checkpoint {
            config: header.config,
            train: header.train,
            step: header.step,
            rng: header.rng,
            params,
            adam,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}
