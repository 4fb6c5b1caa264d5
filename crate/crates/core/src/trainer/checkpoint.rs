//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` manifest length, the
//! JSON manifest, then every tensor as little-endian `f64` in manifest
//! order. Parameters are stored with their Adam moments so that training
//! resumes exactly; the fake-image pools are not stored.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Adam, TrainConfig, TrainState, TranslationModel};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SEASNCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob, in elements.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    epoch: usize,
    iteration: u64,
    config_hash: String,
    config: TrainConfig,
    optimizer_steps: [u64; 4],
    tensors: Vec<Entry>,
}

const NETWORKS: [&str; 4] = ["g_xy", "g_yx", "d_x", "d_y"];

/// SHA-256 of the config's JSON form, hex encoded.
pub fn config_hash(cfg: &TrainConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    Sha256::digest(json.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn parts(state: &TrainState) -> [(&ParamStore, &Adam); 4] {
    let m = &state.model;
    [
        (m.g_xy.params(), &state.opt_g_xy),
        (m.g_yx.params(), &state.opt_g_yx),
        (m.d_x.params(), &state.opt_d_x),
        (m.d_y.params(), &state.opt_d_y),
    ]
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, t: &Tensor, entries: &mut Vec<Entry>| {
        entries.push(Entry {
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };
    let mut steps = [0; 4];
    for (k, (net, (store, opt))) in NETWORKS.iter().zip(parts(state)).enumerate() {
        steps[k] = opt.steps();
        for (i, name) in store.names().iter().enumerate() {
            push(format!("{net}/{name}"), store.get(i), &mut entries);
            push(format!("{net}/adam.m/{name}"), &opt.first_moments()[i], &mut entries);
            push(format!("{net}/adam.v/{name}"), &opt.second_moments()[i], &mut entries);
        }
    }
    let manifest = Manifest {
        dtype: "f64".into(),
        epoch: state.epoch,
        iteration: state.iteration,
        config_hash: config_hash(&state.config),
        config: state.config.clone(),
        optimizer_steps: steps,
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(20 + json.len() + blob.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &out).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let json = bytes
        .get(20..20 + len)
        .ok_or_else(|| corrupt("truncated manifest"))?;
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| corrupt(format!("bad manifest: {e}")))?;
    if manifest.dtype != "f64" {
        return Err(corrupt(format!("unsupported dtype {}", manifest.dtype)));
    }
    if config_hash(&manifest.config) != manifest.config_hash {
        return Err(corrupt("config hash mismatch"));
    }
    manifest.config.validate()?;
    let blob = &bytes[20 + len..];
    let total: usize = manifest
        .tensors
        .iter()
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    if blob.len() != total * 8 {
        return Err(corrupt(format!(
            "blob holds {} bytes, manifest describes {}",
            blob.len(),
            total * 8
        )));
    }
    let mut tensors = std::collections::HashMap::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let raw = blob
            .get(e.offset * 8..(e.offset + n) * 8)
            .ok_or_else(|| corrupt(format!("tensor `{}` out of bounds", e.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(e.name.clone(), Tensor::from_vec(&e.shape, data)?);
    }

    let cfg = manifest.config.clone();
    let mut model = TranslationModel::new(&cfg);
    load_store(model.g_xy.params_mut(), "g_xy", &tensors)?;
    load_store(model.g_yx.params_mut(), "g_yx", &tensors)?;
    load_store(model.d_x.params_mut(), "d_x", &tensors)?;
    load_store(model.d_y.params_mut(), "d_y", &tensors)?;

    let mut state = TrainState::with_model(cfg.clone(), model, manifest.epoch, manifest.iteration);
    let opt = |store: &ParamStore, net: &str, steps: u64| -> Result<Adam> {
        let moments = |kind: &str| -> Result<Vec<Tensor>> {
            store
                .names()
                .iter()
                .map(|n| {
                    tensors
                        .get(&format!("{net}/adam.{kind}/{n}"))
                        .cloned()
                        .ok_or_else(|| corrupt(format!("missing optimizer state for `{net}/{n}`")))
                })
                .collect()
        };
        Adam::restore(store, cfg.beta1, cfg.beta2, steps, moments("m")?, moments("v")?)
    };
    let s = manifest.optimizer_steps;
    state.opt_g_xy = opt(state.model.g_xy.params(), "g_xy", s[0])?;
    state.opt_g_yx = opt(state.model.g_yx.params(), "g_yx", s[1])?;
    state.opt_d_x = opt(state.model.d_x.params(), "d_x", s[2])?;
    state.opt_d_y = opt(state.model.d_y.params(), "d_y", s[3])?;
    Ok(state)
}

fn load_store(
    store: &mut ParamStore,
    net: &str,
    tensors: &std::collections::HashMap<String, Tensor>,
) -> Result<()> {
    store.load_from(|name| tensors.get(&format!("{net}/{name}")))
}
