//! Versioned binary checkpoint.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "DFCKPT\0\0"
//! version      u32
//! header_len   u64
//! header       header_len bytes of UTF-8 JSON (CheckpointHeader)
//! blob         f32 values, addressed by TensorEntry::offset (in elements)
//! ```
//!
//! The header carries the model configuration, the noise schedule, the step
//! counter, the training-configuration echo, the loss history, the adapter
//! state and one entry per stored tensor. Tensor sections are `model`
//! (denoiser parameters, including the conditioner table and adapters),
//! `codec` (autoencoder parameters), and `adam_m` / `adam_v` (optimizer
//! moments keyed by the parameter name). Readers accept any version up to
//! their own and ignore unknown header fields.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DenoiserModel, ModelConfig};
use crate::diffusion::NoiseSchedule;
use crate::error::{ensure, Error, Result};
use crate::nn::{Adam, ParamGroup, ParamId, ParamStore};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DFCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Per-step loss values; `total` is the optimized objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub defect: f64,
    pub object: f64,
    pub attention: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub section: String,
    pub group: Option<ParamGroup>,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub schedule: NoiseSchedule,
    pub step: u64,
    #[serde(default)]
    pub train_config: serde_json::Value,
    #[serde(default)]
    pub loss_history: Vec<LossRecord>,
    pub adapters_enabled: bool,
    pub merged: bool,
    pub optimizer: Option<AdamState>,
    pub tensors: Vec<TensorEntry>,
}

/// A model snapshot with its training state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: DenoiserModel,
    pub schedule: NoiseSchedule,
    pub step: u64,
    pub train_config: serde_json::Value,
    pub loss_history: Vec<LossRecord>,
    pub optimizer: Option<Adam>,
}

fn push_store(store: &ParamStore, section: &str, entries: &mut Vec<TensorEntry>, blob: &mut Vec<f32>) {
    for (_, p) in store.iter() {
        entries.push(TensorEntry {
            name: p.name.clone(),
            section: section.into(),
            group: Some(p.group),
            shape: p.value.shape().to_vec(),
            offset: blob.len(),
        });
        blob.extend_from_slice(p.value.data());
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let model = &ckpt.model;
    let mut entries = Vec::new();
    let mut blob: Vec<f32> = Vec::new();
    push_store(&model.store, "model", &mut entries, &mut blob);
    push_store(&model.codec.store, "codec", &mut entries, &mut blob);
    let optimizer = ckpt.optimizer.as_ref().map(|adam| {
        for (i, m) in adam.moments().iter().enumerate() {
            if let Some((m1, m2)) = m {
                let p = model.store.get(ParamId(i));
                for (section, data) in [("adam_m", m1), ("adam_v", m2)] {
                    entries.push(TensorEntry {
                        name: p.name.clone(),
                        section: section.into(),
                        group: None,
                        shape: p.value.shape().to_vec(),
                        offset: blob.len(),
                    });
                    blob.extend_from_slice(data);
                }
            }
        }
        AdamState {
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            step: adam.step,
        }
    });
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        model: model.config.clone(),
        schedule: ckpt.schedule.clone(),
        step: ckpt.step,
        train_config: ckpt.train_config.clone(),
        loss_history: ckpt.loss_history.clone(),
        adapters_enabled: model.adapters_enabled(),
        merged: model.is_merged(),
        optimizer,
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(20 + json.len() + 4 * blob.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for v in &blob {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    ensure!(bytes.len() >= 20 && &bytes[..8] == CHECKPOINT_MAGIC, Data, "not a checkpoint file");
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    ensure!(version >= 1 && version <= CHECKPOINT_VERSION, Data, "unsupported checkpoint version {version}");
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    ensure!(bytes.len() >= 20 + len, Data, "truncated checkpoint header");
    let header: CheckpointHeader = serde_json::from_slice(&bytes[20..20 + len])?;
    Ok((header, 20 + len))
}

fn fill_store(store: &mut ParamStore, section: &str, entries: &[TensorEntry], blob: &[f32]) -> Result<()> {
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let e = entries
            .iter()
            .find(|e| e.section == section && e.name == name)
            .ok_or_else(|| Error::Data(format!("checkpoint lacks {section} tensor {name}")))?;
        let value = store.value_mut(id);
        ensure!(e.shape == value.shape(), Data, "tensor {name} has shape {:?}, model expects {:?}", e.shape, value.shape());
        let n = value.numel();
        ensure!(e.offset + n <= blob.len(), Data, "tensor {name} runs past the end of the blob");
        value.data_mut().copy_from_slice(&blob[e.offset..e.offset + n]);
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let (header, start) = read_header(&bytes)?;
    let payload = &bytes[start..];
    ensure!(payload.len() % 4 == 0, Data, "checkpoint blob is not a whole number of f32 values");
    let blob: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut model = DenoiserModel::new(&header.model)?;
    fill_store(&mut model.store, "model", &header.tensors, &blob)?;
    fill_store(&mut model.codec.store, "codec", &header.tensors, &blob)?;
    model.set_state(header.adapters_enabled, header.merged);
    let optimizer = match &header.optimizer {
        None => None,
        Some(s) => {
            let mut adam = Adam {
                beta1: s.beta1,
                beta2: s.beta2,
                eps: s.eps,
                weight_decay: s.weight_decay,
                step: s.step,
                ..Adam::default()
            };
            let mut moments = vec![None; model.store.len()];
            for (id, p) in model.store.iter() {
                let find = |sec: &str| header.tensors.iter().find(|e| e.section == sec && e.name == p.name);
                if let (Some(m), Some(v)) = (find("adam_m"), find("adam_v")) {
                    let n = p.value.numel();
                    ensure!(m.offset + n <= blob.len() && v.offset + n <= blob.len(), Data, "optimizer state runs past the blob");
                    moments[id.0] = Some((blob[m.offset..m.offset + n].to_vec(), blob[v.offset..v.offset + n].to_vec()));
                }
            }
            adam.set_moments(moments);
            Some(adam)
        }
    };
    Ok(Checkpoint {
        model,
        schedule: header.schedule,
        step: header.step,
        train_config: header.train_config,
        loss_history: header.loss_history,
        optimizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleConfig;
    use crate::model::{randomize_adapters, UnetConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> DenoiserModel {
        DenoiserModel::new(&ModelConfig {
            unet: UnetConfig {
                widths: [8, 16],
                heads: 2,
                groups: 4,
            },
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_preserves_weights_and_state() {
        let mut m = model();
        randomize_adapters(&mut m.store, &mut ChaCha8Rng::seed_from_u64(1), 0.1);
        m.set_adapters_enabled(false);
        let ckpt = Checkpoint {
            model: m,
            schedule: NoiseSchedule::new(&ScheduleConfig::default()).unwrap(),
            step: 7,
            train_config: serde_json::json!({"steps": 10}),
            loss_history: vec![LossRecord { step: 1, total: 0.5, ..Default::default() }],
            optimizer: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.step, 7);
        assert!(!back.model.adapters_enabled());
        assert_eq!(back.loss_history, ckpt.loss_history);
        for ((_, a), (_, b)) in back.model.store.iter().zip(ckpt.model.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn rejects_foreign_and_future_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        std::fs::write(&p, b"not a checkpoint at all").unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Data(_))));
        let mut bytes = CHECKPOINT_MAGIC.to_vec();
        bytes.extend_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
        bytes.extend_from_slice(&0u64.to_le_bytes());
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Data(_))));
    }
}
