//! Checkpoint files: an 8-byte magic, a little-endian `u32` header length,
//! a JSON header and then every tensor as little-endian `f32`.
//!
//! The whole file is parsed and checked before anything is returned, so a
//! damaged file never yields partial state.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OptimizerState, Stage, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, NamedBn, Param};
use crate::numerics::{BnStats, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"APDRCKPT";

/// Position of the sampling RNG.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub train: TrainConfig,
    pub params: ModelParams<f32>,
    pub optimizer: OptimizerState,
    pub stage: Stage,
    /// Epochs completed in `stage`.
    pub epoch: usize,
    pub step: usize,
    pub rng: RngState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum EntryKind {
    Param,
    BnMean,
    BnVar,
    Velocity,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    kind: EntryKind,
    shape: Vec<usize>,
    /// Offset into the blob, in floats.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ModelConfig,
    train: TrainConfig,
    stage: Stage,
    epoch: usize,
    step: usize,
    rng: RngState,
    momentum: f64,
    weight_decay: f64,
    tensors: Vec<Entry>,
}

/// Writes `ckpt` to `path` through a temporary file in the same directory.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut entries = Vec::new();
    let mut blob: Vec<f32> = Vec::with_capacity(2 * ckpt.params.num_elements());
    let mut push = |name: &str, kind, shape: &[usize], data: &[f32]| {
        entries.push(Entry {
            name: name.to_string(),
            kind,
            shape: shape.to_vec(),
            offset: blob.len(),
        });
        blob.extend_from_slice(data);
    };
    for p in &ckpt.params.params {
        push(&p.name, EntryKind::Param, p.tensor.shape(), p.tensor.data());
    }
    for b in &ckpt.params.bn {
        push(&b.name, EntryKind::BnMean, &[b.stats.len()], &b.stats.mean);
        push(&b.name, EntryKind::BnVar, &[b.stats.var.len()], &b.stats.var);
    }
    for (p, v) in ckpt.params.params.iter().zip(&ckpt.optimizer.velocity) {
        push(&p.name, EntryKind::Velocity, p.tensor.shape(), v);
    }
    let header = Header {
        version: ckpt.version,
        model: ckpt.params.config.clone(),
        train: ckpt.train.clone(),
        stage: ckpt.stage,
        epoch: ckpt.epoch,
        step: ckpt.step,
        rng: ckpt.rng,
        momentum: ckpt.optimizer.momentum,
        weight_decay: ckpt.optimizer.weight_decay,
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(12 + json.len() + 4 * blob.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    for x in &blob {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes).map_err(|reason| Error::load(path, reason))
}

fn parse(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err("not a checkpoint file".into());
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let json = bytes
        .get(12..12 + header_len)
        .ok_or("truncated header")?;
    let header: Header = serde_json::from_slice(json).map_err(|e| format!("bad header: {e}"))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(format!(
            "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
            header.version
        ));
    }
    let raw = &bytes[12 + header_len..];
    if raw.len() % 4 != 0 {
        return Err("truncated tensor data".into());
    }
    let blob: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let expected: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if blob.len() != expected {
        return Err(format!(
            "tensor data holds {} floats, header describes {expected} (truncated file?)",
            blob.len()
        ));
    }
    let slice = |e: &Entry| -> std::result::Result<Vec<f32>, String> {
        let n: usize = e.shape.iter().product();
        blob.get(e.offset..e.offset + n)
            .map(<[f32]>::to_vec)
            .ok_or_else(|| format!("tensor '{}' lies outside the data section", e.name))
    };

    let mut params = Vec::new();
    let mut velocity = Vec::new();
    let mut bn: Vec<NamedBn<f32>> = Vec::new();
    for e in &header.tensors {
        let data = slice(e)?;
        match e.kind {
            EntryKind::Param => {
                let tensor = Tensor::new(&e.shape, data).map_err(|err| err.to_string())?;
                params.push(Param {
                    name: e.name.clone(),
                    tensor,
                    // Restored from the model layout by `from_parts`.
                    group: crate::model::StageGroup::Stage1,
                    decay: false,
                });
            }
            EntryKind::BnMean => bn.push(NamedBn {
                name: e.name.clone(),
                stats: BnStats { mean: data, var: Vec::new() },
            }),
            EntryKind::BnVar => match bn.last_mut() {
                Some(last) if last.name == e.name && last.stats.var.is_empty() => last.stats.var = data,
                _ => return Err(format!("running variance of '{}' has no matching mean", e.name)),
            },
            EntryKind::Velocity => velocity.push((e.name.clone(), e.shape.clone(), data)),
        }
    }
    let params = ModelParams::from_parts(header.model, params, bn).map_err(|e| e.to_string())?;
    if velocity.len() != params.params.len() {
        return Err(format!(
            "{} velocity buffers for {} parameters",
            velocity.len(),
            params.params.len()
        ));
    }
    for ((name, shape, _), p) in velocity.iter().zip(&params.params) {
        if name != &p.name || shape.as_slice() != p.tensor.shape() {
            return Err(format!("velocity buffer '{name}' does not match parameter '{}'", p.name));
        }
    }
    header.train.validate().map_err(|e| e.to_string())?;
    Ok(Checkpoint {
        version: header.version,
        train: header.train,
        params,
        optimizer: OptimizerState {
            velocity: velocity.into_iter().map(|(_, _, v)| v).collect(),
            momentum: header.momentum,
            weight_decay: header.weight_decay,
        },
        stage: header.stage,
        epoch: header.epoch,
        step: header.step,
        rng: header.rng,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::AttributeSchema;

    fn sample() -> Checkpoint {
        let model = ModelConfig::tiny(AttributeSchema::default_synthetic(), 3);
        let params = ModelParams::init(&model, 4).unwrap();
        let mut optimizer = OptimizerState::new(&params, 0.9, 5e-4);
        for (i, v) in optimizer.velocity.iter_mut().enumerate() {
            v.iter_mut().enumerate().for_each(|(j, x)| *x = (i * 31 + j) as f32 * 1e-3 - 0.5);
        }
        Checkpoint {
            version: CHECKPOINT_VERSION,
            train: TrainConfig::default(),
            params,
            optimizer,
            stage: Stage::Two,
            epoch: 7,
            step: 91,
            rng: RngState {
                seed: [9; 32],
                stream: 1,
                word_pos: u128::from(u64::MAX) + 5,
            },
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let ckpt = sample();
        save_checkpoint(&path, &ckpt).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        save_checkpoint(&path, &sample()).unwrap();
        let bytes = fs::read(&path).unwrap();
        for cut in [4, 11, 40, bytes.len() - 4, bytes.len() - 1] {
            fs::write(&path, &bytes[..cut]).unwrap();
            assert!(matches!(load_checkpoint(&path), Err(Error::Load { .. })), "cut at {cut}");
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let mut ckpt = sample();
        ckpt.version = 99;
        save_checkpoint(&path, &ckpt).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("version 99"), "{err}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let ckpt = sample();
        save_checkpoint(&path, &ckpt).unwrap();
        // Rewrite the header so the model claims a wider attribute embedding.
        let bytes = fs::read(&path).unwrap();
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + n]).unwrap();
        header["model"]["attr_dim"] = serde_json::json!(ckpt.params.config.attr_dim + 1);
        let json = serde_json::to_vec(&header).unwrap();
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[12 + n..]);
        fs::write(&path, out).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Load { .. })));
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        fs::write(&path, b"hello world, not a checkpoint").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
