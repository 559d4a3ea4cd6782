//! Checkpoints in the safetensors layout: every parameter, running buffer
//! and Adam moment as an `F64` tensor, with the configurations and counters
//! in the header metadata.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::{Adam, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::model::{Architecture, ModelConfig, Network};
use crate::seed::SeedPlan;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub format_version: u32,
    pub architecture: Architecture,
    pub step: u64,
    pub num_tensors: usize,
    pub num_trainable: usize,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
}

fn to_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn from_bytes(b: &[u8]) -> Vec<f64> {
    b.chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect()
}

pub fn save_checkpoint(path: &Path, trainer: &Trainer) -> Result<()> {
    let store = trainer.net.store();
    let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (id, e) in store.entries() {
        owned.push((format!("param/{}", e.name), e.value.shape().to_vec(), to_bytes(e.value.data())));
        if e.kind.trainable() {
            let n = e.value.numel();
            owned.push((format!("adam.m/{}", e.name), vec![n], to_bytes(&trainer.opt.m[id.0])));
            owned.push((format!("adam.v/{}", e.name), vec![n], to_bytes(&trainer.opt.v[id.0])));
        }
    }
    let views = owned
        .iter()
        .map(|(name, shape, bytes)| Ok((name.as_str(), TensorView::new(Dtype::F64, shape.clone(), bytes)?)))
        .collect::<std::result::Result<Vec<_>, safetensors::SafeTensorError>>()
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let meta: HashMap<String, String> = [
        ("format_version", CHECKPOINT_FORMAT_VERSION.to_string()),
        ("architecture", serde_json::to_string(&trainer.net.architecture())?),
        ("model_config", serde_json::to_string(trainer.net.config())?),
        ("train_config", serde_json::to_string(&trainer.cfg)?),
        ("step", trainer.step.to_string()),
        ("adam_steps", serde_json::to_string(&trainer.opt.steps)?),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let bytes = safetensors::tensor::serialize(views, &Some(meta)).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Parsed {
    info: CheckpointInfo,
    adam_steps: Vec<u64>,
}

fn corrupt(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::CorruptCheckpoint(format!("{}: {what}", path.display()))
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<Parsed> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| corrupt(path, e))?;
    let map = meta.metadata().as_ref().ok_or_else(|| corrupt(path, "missing metadata"))?;
    let field = |k: &str| map.get(k).ok_or_else(|| corrupt(path, format!("missing {k}")));
    let format_version: u32 = field("format_version")?.parse().map_err(|e| corrupt(path, e))?;
    if format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(corrupt(path, format!("unsupported format version {format_version}")));
    }
    let json = |k: &str| -> Result<serde_json::Value> { serde_json::from_str(field(k)?).map_err(|e| corrupt(path, e)) };
    let architecture: Architecture = serde_json::from_value(json("architecture")?).map_err(|e| corrupt(path, e))?;
    let model_config: ModelConfig = serde_json::from_value(json("model_config")?).map_err(|e| corrupt(path, e))?;
    let train_config: TrainConfig = serde_json::from_value(json("train_config")?).map_err(|e| corrupt(path, e))?;
    let adam_steps: Vec<u64> = serde_json::from_value(json("adam_steps")?).map_err(|e| corrupt(path, e))?;
    let step: u64 = field("step")?.parse().map_err(|e| corrupt(path, e))?;
    let num_tensors = meta.tensors().len();
    Ok(Parsed {
        info: CheckpointInfo {
            format_version,
            architecture,
            step,
            num_tensors,
            num_trainable: 0,
            model_config,
            train_config,
        },
        adam_steps,
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Restores network, optimizer state and step counter.
pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let bytes = read(path)?;
    let parsed = parse_header(path, &bytes)?;
    let tensors = SafeTensors::deserialize(&bytes).map_err(|e| corrupt(path, e))?;
    let info = parsed.info;
    let mut net = Network::new(info.architecture, info.model_config, 0)?;
    let mut opt = Adam::new(
        net.store(),
        info.train_config.learning_rate,
        info.train_config.beta1,
        info.train_config.beta2,
        info.train_config.adam_eps,
    );
    if parsed.adam_steps.len() != opt.steps.len() {
        return Err(corrupt(path, "optimizer state does not match the network"));
    }
    opt.steps = parsed.adam_steps;
    let fetch = |name: &str, len: usize| -> Result<Vec<f64>> {
        let view = tensors.tensor(name).map_err(|e| corrupt(path, format!("{name}: {e}")))?;
        if view.dtype() != Dtype::F64 || view.data().len() != 8 * len {
            return Err(corrupt(path, format!("{name}: unexpected dtype or size")));
        }
        Ok(from_bytes(view.data()))
    };
    let names: Vec<_> = net
        .store()
        .entries()
        .map(|(id, e)| (id, e.name.clone(), e.value.numel(), e.kind.trainable()))
        .collect();
    for (id, name, n, trainable) in names {
        let values = fetch(&format!("param/{name}"), n)?;
        net.store_mut().get_mut(id).data_mut().copy_from_slice(&values);
        if trainable {
            opt.m[id.0] = fetch(&format!("adam.m/{name}"), n)?;
            opt.v[id.0] = fetch(&format!("adam.v/{name}"), n)?;
        }
    }
    if !net.store().is_finite() {
        return Err(corrupt(path, "non-finite parameter"));
    }
    let cfg = info.train_config;
    Ok(Trainer {
        net,
        seeds: SeedPlan::new(cfg.seed),
        cfg,
        opt,
        step: info.step,
    })
}

/// Header summary without materializing the network.
pub fn inspect_checkpoint(path: &Path) -> Result<CheckpointInfo> {
    let bytes = read(path)?;
    let mut info = parse_header(path, &bytes)?.info;
    SafeTensors::deserialize(&bytes).map_err(|e| corrupt(path, e))?;
    let net = Network::new(info.architecture, info.model_config.clone(), 0)?;
    info.num_trainable = net.store().num_trainable();
    Ok(info)
}
