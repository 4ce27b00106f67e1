//! Binary checkpoints.
//!
//! Layout: magic `EGCK`, u16 LE version, u32 LE header length, UTF-8 JSON
//! header, then f64 LE payload: every parameter, then every first moment, then
//! every second moment, each in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{EgModel, ModelConfig};
use crate::tensor::Tensor;
use crate::train::optim::AdamState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EGCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Complete training state after `epoch` finished epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    /// `(name, value)` in model order.
    pub params: Vec<(String, Tensor)>,
    pub adam: AdamState,
    pub epoch: usize,
    /// Seed of the data-order and Gumbel streams; each epoch derives its own
    /// stream from it, so this is the whole RNG state at an epoch boundary.
    pub rng_seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model_config: String,
    epoch: usize,
    adam_step: u64,
    rng_seed: u64,
    params: Vec<ParamEntry>,
}

impl Checkpoint {
    pub fn capture(model: &EgModel, adam: &AdamState, epoch: usize, rng_seed: u64) -> Self {
        Self {
            model_config: model.config.clone(),
            params: model.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            adam: adam.clone(),
            epoch,
            rng_seed,
        }
    }

    /// Rebuilds the model and loads the stored parameters into it.
    pub fn model(&self) -> Result<EgModel> {
        let mut model = EgModel::new(self.model_config.clone())?;
        model.params.load(self.params.clone())?;
        Ok(model)
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = Header {
            model_config: self.model_config.to_toml(),
            epoch: self.epoch,
            adam_step: self.adam.step,
            rng_seed: self.rng_seed,
            params: self
                .params
                .iter()
                .map(|(n, t)| ParamEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let tensors = self.params.iter().map(|(_, t)| t).chain(&self.adam.m).chain(&self.adam.v);
        for t in tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], origin: &str) -> Result<Self> {
        let fail = |detail: String| Error::format(origin, detail);
        let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
            let end = pos
                .checked_add(n)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| fail(format!("truncated {what}")))?;
            let out = &bytes[*pos..end];
            *pos = end;
            Ok(out)
        };
        let mut pos = 0;
        if take(&mut pos, 4, "magic")? != CHECKPOINT_MAGIC {
            return Err(fail("bad magic".into()));
        }
        let version = u16::from_le_bytes(take(&mut pos, 2, "version")?.try_into().expect("2 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(fail(format!("unknown checkpoint version {version}")));
        }
        let len = u32::from_le_bytes(take(&mut pos, 4, "header length")?.try_into().expect("4 bytes")) as usize;
        let header: Header =
            serde_json::from_slice(take(&mut pos, len, "header")?).map_err(|e| fail(format!("invalid header: {e}")))?;
        let model_config = ModelConfig::from_toml(&header.model_config)?;
        let read_tensor = |pos: &mut usize, shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let raw = take(pos, n * 8, "payload")?;
            let data = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            Tensor::new(shape.to_vec(), data)
        };
        let mut params = Vec::with_capacity(header.params.len());
        for p in &header.params {
            params.push((p.name.clone(), read_tensor(&mut pos, &p.shape)?));
        }
        let mut m = Vec::with_capacity(params.len());
        for p in &header.params {
            m.push(read_tensor(&mut pos, &p.shape)?);
        }
        let mut v = Vec::with_capacity(params.len());
        for p in &header.params {
            v.push(read_tensor(&mut pos, &p.shape)?);
        }
        if pos != bytes.len() {
            return Err(fail(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self {
            model_config,
            params,
            adam: AdamState {
                step: header.adam_step,
                m,
                v,
            },
            epoch: header.epoch,
            rng_seed: header.rng_seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, &path.display().to_string())
    }
}
