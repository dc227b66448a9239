//! Versioned checkpoints: parameters, batch-norm buffers and optimizer moments
//! as safetensors, with a JSON manifest in the header metadata.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PopError, Result};
use crate::nn::Tensor;
use crate::train::{TrainConfig, TrainState};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST_KEY: &str = "manifest";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub step: u64,
    pub seed: u64,
    pub config: TrainConfig,
}

fn ckpt_err(path: &Path, e: impl std::fmt::Display) -> PopError {
    PopError::Checkpoint(format!("{}: {e}", path.display()))
}

fn to_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Serialize to bytes; identical state gives identical bytes.
pub fn to_bytes_checkpoint(cfg: &TrainConfig, state: &TrainState) -> Result<Vec<u8>> {
    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<u8>)> = BTreeMap::new();
    for (_, e) in state.net.store.iter() {
        tensors.insert(e.name.clone(), (e.value.shape().to_vec(), to_bytes(&e.value)));
    }
    for (name, t) in state.opt.state(&state.net.store) {
        tensors.insert(name, (t.shape().to_vec(), to_bytes(&t)));
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config_hash: cfg.architecture_hash(),
        step: state.step,
        seed: cfg.seed,
        config: cfg.clone(),
    };
    let meta = HashMap::from([(MANIFEST_KEY.to_string(), serde_json::to_string(&manifest)?)]);
    let views = tensors
        .iter()
        .map(|(k, (shape, bytes))| {
            safetensors::tensor::TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (k.clone(), v))
                .map_err(|e| PopError::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize(views, Some(meta)).map_err(|e| PopError::Checkpoint(e.to_string()))
}

/// Write atomically and return the SHA-256 of the file.
pub fn save(path: &Path, cfg: &TrainConfig, state: &TrainState) -> Result<String> {
    let bytes = to_bytes_checkpoint(cfg, state)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| PopError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| PopError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| PopError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn read_manifest(path: &Path) -> Result<CheckpointManifest> {
    let bytes = fs::read(path).map_err(|e| PopError::io(path, e))?;
    manifest_of(path, &bytes)
}

fn manifest_of(path: &Path, bytes: &[u8]) -> Result<CheckpointManifest> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| ckpt_err(path, e))?;
    let text = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(MANIFEST_KEY))
        .ok_or_else(|| ckpt_err(path, "missing manifest"))?;
    let manifest: CheckpointManifest = serde_json::from_str(text).map_err(|e| ckpt_err(path, e))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ckpt_err(
            path,
            format!("format version {} (expected {FORMAT_VERSION})", manifest.format_version),
        ));
    }
    if manifest.config_hash != manifest.config.architecture_hash() {
        return Err(ckpt_err(path, "config hash does not match the embedded config"));
    }
    Ok(manifest)
}

/// Restore the config and full training state.
pub fn load(path: &Path) -> Result<(TrainConfig, TrainState)> {
    let bytes = fs::read(path).map_err(|e| PopError::io(path, e))?;
    let manifest = manifest_of(path, &bytes)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| ckpt_err(path, e))?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 || view.shape().len() != 4 {
            return Err(ckpt_err(path, format!("tensor {name} is not a 4-d f32 tensor")));
        }
        let shape = [view.shape()[0], view.shape()[1], view.shape()[2], view.shape()[3]];
        let data = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(name, Tensor::from_vec(shape, data)?);
    }
    let cfg = manifest.config;
    let mut state = TrainState::new(&cfg)?;
    let mut adam: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut params = BTreeMap::new();
    for (k, v) in tensors {
        if k.starts_with("adam.") {
            adam.insert(k, v);
        } else {
            params.insert(k, v);
        }
    }
    state.net.store.load(params).map_err(|e| ckpt_err(path, e))?;
    let step = manifest.step;
    state.opt.restore(&state.net.store, step, &mut adam).map_err(|e| ckpt_err(path, e))?;
    if let Some(extra) = adam.keys().next() {
        return Err(ckpt_err(path, format!("unexpected tensor {extra}")));
    }
    state.step = step;
    Ok((cfg, state))
}

/// Load and require the network layout to match `expected`.
pub fn load_expecting(path: &Path, expected: &TrainConfig) -> Result<(TrainConfig, TrainState)> {
    let manifest = read_manifest(path)?;
    if manifest.config_hash != expected.architecture_hash() {
        return Err(ckpt_err(path, "config hash mismatch"));
    }
    load(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::NetConfig;

    fn tiny() -> TrainConfig {
        TrainConfig {
            resolution: 32,
            net: NetConfig::with_width(0.125),
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_exact_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let mut state = TrainState::new(&cfg).unwrap();
        state.step = 17;
        let p = dir.path().join("a.safetensors");
        let h1 = save(&p, &cfg, &state).unwrap();
        assert_eq!(h1, file_sha256(&p).unwrap());
        let (cfg2, state2) = load(&p).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(state2.step, 17);
        let q = dir.path().join("b.safetensors");
        assert_eq!(save(&q, &cfg2, &state2).unwrap(), h1);
    }

    #[test]
    fn mismatched_layout_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let p = dir.path().join("a.safetensors");
        save(&p, &cfg, &TrainState::new(&cfg).unwrap()).unwrap();
        let other = TrainConfig {
            net: NetConfig::with_width(0.25),
            ..cfg.clone()
        };
        assert!(load_expecting(&p, &other).is_err());
        assert!(load_expecting(&p, &cfg).is_ok());
        fs::write(&p, b"garbage").unwrap();
        assert!(matches!(load(&p), Err(PopError::Checkpoint(_))));
    }
}
