//! Binary checkpoints: magic, version, JSON metadata, then named tensors.
//!
//! ```text
//! "LGSD" | version u32 | meta_len u32 | meta (UTF-8 JSON)
//! n_tensors u32 | { name_len u32 | name | rank u32 | dims u32… | f32… }
//! ```
//! All integers and floats are little-endian.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SegModel};
use crate::tensor::Tensor;
use crate::train::optim::AdamWState;
use crate::train::trainer::{epoch_rng, TrainConfig, Trainer};

pub const MAGIC: &[u8; 4] = b"LGSD";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    pub epoch: usize,
    pub step: u64,
    pub total_steps: u64,
    pub adam_t: u64,
    pub best_val_dice: Option<f64>,
    /// State of the generator that drives the next epoch, hex encoded.
    pub rng_state: String,
}

pub fn encode(meta: &CheckpointMeta, tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(meta)?;
    let mut out = Vec::with_capacity(16 + meta.len() + tensors.iter().map(|(n, t)| 16 + n.len() + 4 * t.numel()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, len_u32(meta.len())?);
    out.extend_from_slice(&meta);
    put_u32(&mut out, len_u32(tensors.len())?);
    for (name, t) in tensors {
        put_u32(&mut out, len_u32(name.len())?);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, len_u32(t.rank())?);
        for &d in t.shape() {
            put_u32(&mut out, len_u32(d)?);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(CheckpointMeta, Vec<(String, Tensor)>)> {
    if bytes.len() < MAGIC.len() {
        if MAGIC.starts_with(bytes) {
            return Err(Error::Corruption("file ends inside the magic".into()));
        }
        return Err(Error::format(0, "not a checkpoint (bad magic)"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(0, "not a checkpoint (bad magic)"));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::Corruption(format!("metadata is not valid: {e}")))?;
    let n = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n.min(1 << 16));
    let mut seen = HashMap::new();
    for _ in 0..n {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Corruption("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Corruption(format!("tensor {name} dimensions overflow")))?;
        let payload = r.take(numel.checked_mul(4).ok_or_else(|| Error::Corruption("payload overflow".into()))?)?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Corruption(format!("tensor {name}: {e}")))?;
        if seen.insert(name.clone(), ()).is_some() {
            return Err(Error::Corruption(format!("duplicate tensor {name}")));
        }
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Corruption(format!("{} trailing bytes after the last tensor", bytes.len() - r.pos)));
    }
    Ok((meta, tensors))
}

/// Writes to a sibling temporary file, then renames into place.
pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    let store = &trainer.model.store;
    let meta = CheckpointMeta {
        train_config: trainer.config.clone(),
        model_config: trainer.model.config.clone(),
        epoch: trainer.epoch,
        step: trainer.step,
        total_steps: trainer.total_steps,
        adam_t: trainer.opt.t,
        best_val_dice: trainer.best_val_dice,
        rng_state: epoch_rng(trainer.config.seed, trainer.epoch).state().iter().map(|b| format!("{b:02x}")).collect(),
    };
    let mut tensors: Vec<(String, &Tensor)> = store.iter().map(|(_, n, t)| (n.to_string(), t)).collect();
    for (prefix, moments) in [("adamw.m.", &trainer.opt.m), ("adamw.v.", &trainer.opt.v)] {
        tensors.extend(store.iter().zip(moments).map(|((_, n, _), t)| (format!("{prefix}{n}"), t)));
    }
    let bytes = encode(&meta, &tensors)?;
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Rebuilds the model and optimizer; nothing is returned unless every
/// tensor is present with the expected shape.
pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let (meta, tensors) = decode(&fs::read(path)?)?;
    let mut by_name: HashMap<String, Tensor> = tensors.into_iter().collect();
    let mut model = SegModel::new(meta.model_config.clone(), meta.train_config.seed)?;
    let mut take = |name: &str, like: &Tensor| -> Result<Tensor> {
        let t = by_name.remove(name).ok_or_else(|| Error::Corruption(format!("missing tensor {name}")))?;
        if t.shape() != like.shape() {
            return Err(Error::Corruption(format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), like.shape())));
        }
        Ok(t)
    };
    let names: Vec<String> = model.store.iter().map(|(_, n, _)| n.to_string()).collect();
    let mut params = Vec::with_capacity(names.len());
    let mut m = Vec::with_capacity(names.len());
    let mut v = Vec::with_capacity(names.len());
    for (name, like) in names.iter().zip(model.store.tensors()) {
        params.push(take(name, like)?);
        m.push(take(&format!("adamw.m.{name}"), like)?);
        v.push(take(&format!("adamw.v.{name}"), like)?);
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Corruption(format!("unexpected tensor {extra}")));
    }
    for (slot, t) in model.store.tensors_mut().iter_mut().zip(params) {
        *slot = t;
    }
    Ok(Trainer {
        model,
        config: meta.train_config,
        opt: AdamWState { m, v, t: meta.adam_t },
        epoch: meta.epoch,
        step: meta.step,
        total_steps: meta.total_steps,
        best_val_dice: meta.best_val_dice,
    })
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Contract(format!("length {n} does not fit the checkpoint format")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Corruption(format!("truncated at byte {}: needed {n} more bytes", self.bytes.len()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
