//! Binary checkpoint: `TKGD` magic, format version, a length-prefixed JSON
//! header, then named little-endian `f64` tensor records.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, TrainConfig};
use crate::corpus::TokenEntropy;
use crate::dpcl::{DpclParams, DPCL_TENSOR_NAMES};
use crate::error::ModelError;
use crate::gndiff::{DenoiserParams, TokenSpace, DENOISER_TENSOR_NAMES};
use crate::numkit::{AdamConfig, AdamState, RngState, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TKGD";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to evaluate a model or continue training it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    /// Generator the next epoch starts from.
    pub rng: RngState,
    pub best_val_mrr: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    space: TokenSpace,
    epoch: usize,
    rng: RngState,
    adam: AdamConfig,
    adam_step: u64,
    best_val_mrr: Option<f64>,
    entropy_total_positions: u64,
}

fn param_names() -> Vec<&'static str> {
    DPCL_TENSOR_NAMES.iter().chain(&DENOISER_TENSOR_NAMES).copied().collect()
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            space: self.model.space,
            epoch: self.epoch,
            rng: self.rng,
            adam: self.optimizer.config,
            adam_step: self.optimizer.step,
            best_val_mrr: self.best_val_mrr,
            entropy_total_positions: self.model.entropies.total_positions,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);

        let names = param_names();
        let params = self.model.params();
        let mut records: Vec<(String, &Tensor)> = Vec::new();
        for (name, t) in names.iter().zip(&params) {
            records.push((name.to_string(), t));
        }
        for (name, t) in names.iter().zip(&self.optimizer.first) {
            records.push((format!("adam.m.{name}"), t));
        }
        for (name, t) in names.iter().zip(&self.optimizer.second) {
            records.push((format!("adam.v.{name}"), t));
        }
        let counts = Tensor::new(
            vec![self.model.entropies.counts.len()],
            self.model.entropies.counts.iter().map(|&c| c as f64).collect(),
        )
        .expect("finite");
        buf.extend_from_slice(&(records.len() as u32 + 1).to_le_bytes());
        for (name, t) in records {
            put_tensor(&mut buf, &name, t);
        }
        put_tensor(&mut buf, "entropy.counts", &counts);
        buf
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self, ModelError> {
        let corrupt = |detail: &str| ModelError::Checkpoint { path: path.to_owned(), detail: detail.to_owned() };
        let mut r = Reader { bytes, at: 0 };
        let magic = r.take(4).ok_or_else(|| corrupt("truncated header"))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let version = r.u32().ok_or_else(|| corrupt("truncated header"))?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Incompatible { path: path.to_owned(), found: version, expected: CHECKPOINT_VERSION });
        }
        let len = r.u32().ok_or_else(|| corrupt("truncated header"))? as usize;
        let json = r.take(len).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| corrupt(&format!("bad header: {e}")))?;
        let count = r.u32().ok_or_else(|| corrupt("truncated record table"))? as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            records.push(r.tensor().ok_or_else(|| corrupt("truncated tensor record"))?);
        }
        if r.at != bytes.len() {
            return Err(corrupt("trailing bytes after the last record"));
        }
        let mut lookup = |name: &str| -> Result<Tensor, ModelError> {
            let i = records.iter().position(|(n, _)| n == name).ok_or_else(|| corrupt(&format!("missing `{name}`")))?;
            Ok(records.swap_remove(i).1)
        };
        let names = param_names();
        let mut params = Vec::new();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for name in &names {
            params.push(lookup(name)?);
        }
        for name in &names {
            first.push(lookup(&format!("adam.m.{name}"))?);
        }
        for name in &names {
            second.push(lookup(&format!("adam.v.{name}"))?);
        }
        let counts: Vec<u64> = lookup("entropy.counts")?.data().iter().map(|&c| c as u64).collect();
        let denoiser = DenoiserParams::from_tensors(header.space, params.split_off(DPCL_TENSOR_NAMES.len()))?;
        let dpcl = DpclParams::from_tensors(params)?;
        let entropies = TokenEntropy {
            entropy: crate::corpus::entropies_from_counts(&counts),
            counts,
            total_positions: header.entropy_total_positions,
        };
        Ok(Checkpoint {
            config: header.config,
            model: Model { space: header.space, dpcl, denoiser, entropies },
            optimizer: AdamState { config: header.adam, step: header.adam_step, first, second },
            epoch: header.epoch,
            rng: header.rng,
            best_val_mrr: header.best_val_mrr,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.at.checked_add(n)?;
        let out = self.bytes.get(self.at..end)?;
        self.at = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn tensor(&mut self) -> Option<(String, Tensor)> {
        let name_len = self.u32()? as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec()).ok()?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = self.take(n.checked_mul(8)?)?;
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Some((name, Tensor::new(shape, data).ok()?))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), ModelError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| ModelError::Io { path: dir.display().to_string(), source: e })?;
    }
    fs::write(path, ckpt.to_bytes()).map_err(|e| ModelError::Io { path: path.display().to_string(), source: e })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let bytes = fs::read(path).map_err(|e| ModelError::Io { path: path.display().to_string(), source: e })?;
    Checkpoint::from_bytes(&bytes, &path.display().to_string())
}
