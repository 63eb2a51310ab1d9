//! Binary checkpoints: `SCIDA1` magic, format version, a JSON header with the
//! run configuration and trainer bookkeeping, then raw little-endian tensors
//! (parameter values, momentum buffers and the label embedding). A JSON
//! sidecar next to each blob records `{epoch, config_hash, rng_seed}`.

use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dwc::PseudoLabelSet;
use crate::error::{Result, ScidaError};
use crate::lwc::CorrelationMatrix;
use crate::models::ModelState;
use crate::nn::{Module, Scalar};
use crate::trainer::{Real, TrainLog, TrainerState};

pub const MAGIC: &[u8; 6] = b"SCIDA1";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    config: RunConfig,
    epoch: usize,
    streak: usize,
    previous: PseudoLabelSet,
    correlation: Option<CorrelationMatrix>,
    log: TrainLog,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub epoch: usize,
    pub config_hash: String,
    pub rng_seed: u64,
}

fn ck(msg: impl Into<String>) -> ScidaError {
    ScidaError::Checkpoint(msg.into())
}

fn push_tensor(name: String, a: &ArrayD<Real>, entries: &mut Vec<TensorEntry>, data: &mut Vec<u8>) {
    entries.push(TensorEntry {
        name,
        shape: a.shape().to_vec(),
        offset: data.len(),
    });
    for &v in a.iter() {
        v.write_le(data);
    }
}

pub fn to_bytes(cfg: &RunConfig, state: &TrainerState) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut data = Vec::new();
    for (name, p) in state.model.params() {
        push_tensor(format!("{name}.value"), &p.value, &mut entries, &mut data);
        push_tensor(format!("{name}.velocity"), &p.velocity, &mut entries, &mut data);
    }
    push_tensor(
        "embedding".into(),
        &state.model.embedding.matrix.clone().into_dyn(),
        &mut entries,
        &mut data,
    );
    let header = Header {
        dtype: Real::DTYPE.into(),
        config: cfg.clone(),
        epoch: state.epoch,
        streak: state.streak,
        previous: state.previous.clone(),
        correlation: state.correlation.clone(),
        log: state.log.clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 12 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

fn read_tensor(data: &[u8], e: &TensorEntry) -> Result<ArrayD<Real>> {
    let n: usize = e.shape.iter().product();
    let end = e.offset + n * Real::BYTES;
    let bytes = data
        .get(e.offset..end)
        .ok_or_else(|| ck(format!("tensor '{}' runs past the end of the file", e.name)))?;
    let vals: Vec<Real> = bytes.chunks_exact(Real::BYTES).map(Real::read_le).collect();
    ArrayD::from_shape_vec(IxDyn(&e.shape), vals).map_err(|err| ck(format!("tensor '{}': {err}", e.name)))
}

pub fn from_bytes(bytes: &[u8]) -> Result<(RunConfig, TrainerState)> {
    if bytes.len() < MAGIC.len() + 12 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(ck("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(ck(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[10..18].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(18..18 + hlen).ok_or_else(|| ck("truncated header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| ck(format!("header: {e}")))?;
    if header.dtype != Real::DTYPE {
        return Err(ck(format!("checkpoint stores {}, expected {}", header.dtype, Real::DTYPE)));
    }
    let data = &bytes[18 + hlen..];
    let cfg = header.config;
    let mut model = ModelState::<Real>::new(cfg.model_config(), cfg.seed)?;
    let mut tensors: std::collections::BTreeMap<&str, &TensorEntry> =
        header.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut take = |name: &str| -> Result<ArrayD<Real>> {
        let e = tensors.remove(name).ok_or_else(|| ck(format!("missing tensor '{name}'")))?;
        read_tensor(data, e)
    };
    for (name, p) in model.params_mut() {
        let value = take(&format!("{name}.value"))?;
        let velocity = take(&format!("{name}.velocity"))?;
        if value.shape() != p.value.shape() || velocity.shape() != p.value.shape() {
            return Err(ck(format!("tensor '{name}' has the wrong shape")));
        }
        p.value = value;
        p.velocity = velocity;
        p.zero_grad();
    }
    let emb = take("embedding")?;
    model.embedding.matrix = emb
        .into_dimensionality()
        .map_err(|e| ck(format!("embedding: {e}")))?;
    if !tensors.is_empty() {
        return Err(ck(format!("unexpected tensors: {:?}", tensors.keys().collect::<Vec<_>>())));
    }
    let state = TrainerState {
        model,
        epoch: header.epoch,
        previous: header.previous,
        streak: header.streak,
        correlation: header.correlation,
        log: header.log,
    };
    Ok((cfg, state))
}

pub fn save(path: &Path, cfg: &RunConfig, state: &TrainerState) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| ScidaError::io(dir, e))?;
    }
    std::fs::write(path, to_bytes(cfg, state)?).map_err(|e| ScidaError::io(path, e))?;
    let sidecar = Sidecar {
        epoch: state.epoch,
        config_hash: cfg.hash(),
        rng_seed: cfg.seed,
    };
    crate::datasets::write_json(&sidecar_path(path), &sidecar)
}

pub fn load(path: &Path) -> Result<(RunConfig, TrainerState)> {
    let bytes = std::fs::read(path).map_err(|e| ScidaError::io(path, e))?;
    from_bytes(&bytes)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn epoch_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.ckpt"))
}

/// Writes `epoch_NNNN.ckpt` and `latest.ckpt` (each with a sidecar).
pub fn save_epoch(dir: &Path, cfg: &RunConfig, state: &TrainerState) -> Result<()> {
    save(&epoch_path(dir, state.epoch), cfg, state)?;
    save(&dir.join("latest.ckpt"), cfg, state)
}
