//! Checkpoint files: an 8-byte little-endian manifest length, a JSON
//! manifest, then every tensor as little-endian `f64` values in manifest
//! order.

use std::fs;
use std::path::Path;

use cmpt_core::autodiff::ParamStore;
use cmpt_core::encoder::{EncoderConfig, InputShape, Modality};
use cmpt_core::model::{CmptModel, ModelSpec, Pretrained};
use cmpt_core::tensor::Tensor2D;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const FORMAT: &str = "cmpt-ckpt/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Offset into the payload, in `f64` values.
    pub offset: usize,
    pub trainable: bool,
}

/// What a checkpoint holds, with the settings needed to rebuild its layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CheckpointKind {
    Model { spec: ModelSpec },
    Pretrained { modality: Modality, input: InputShape, encoder: EncoderConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    #[serde(flatten)]
    pub kind: CheckpointKind,
    pub seed: u64,
    pub epoch: usize,
    pub tensors: Vec<TensorEntry>,
    /// Total payload length in `f64` values.
    pub payload_len: usize,
}

fn corrupt(path: &Path, what: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: corrupt checkpoint: {what}", path.display()))
}

fn encode(kind: CheckpointKind, store: &ParamStore, seed: u64, epoch: usize) -> Vec<u8> {
    let mut tensors = Vec::with_capacity(store.len());
    let mut payload = Vec::new();
    for (_, p) in store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: [p.value.rows(), p.value.cols()],
            offset: payload.len() / 8,
            trainable: p.trainable,
        });
        for v in p.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        kind,
        seed,
        epoch,
        payload_len: payload.len() / 8,
        tensors,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

/// Parses a checkpoint into its manifest and tensors, checking that the
/// payload matches the manifest exactly.
pub fn decode(path: &Path, bytes: &[u8]) -> CliResult<(Manifest, Vec<Tensor2D>)> {
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .ok_or_else(|| corrupt(path, "file shorter than its header"))?
        .try_into()
        .expect("8 bytes");
    let mlen = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| corrupt(path, "manifest length"))?;
    let body = bytes.get(8..).unwrap_or_default();
    if mlen > body.len() {
        return Err(corrupt(path, "manifest truncated"));
    }
    let manifest: Manifest = serde_json::from_slice(&body[..mlen]).map_err(|e| corrupt(path, e))?;
    if manifest.format != FORMAT {
        return Err(CliError::Data(format!(
            "{}: unsupported checkpoint version '{}' (expected '{FORMAT}')",
            path.display(),
            manifest.format
        )));
    }
    let payload = &body[mlen..];
    if payload.len() != manifest.payload_len * 8 {
        return Err(corrupt(
            path,
            format!("payload holds {} bytes, manifest declares {}", payload.len(), manifest.payload_len * 8),
        ));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    let mut expected_offset = 0;
    for t in &manifest.tensors {
        let n = t.shape[0] * t.shape[1];
        if t.offset != expected_offset || t.offset + n > manifest.payload_len {
            return Err(corrupt(path, format!("tensor '{}' lies outside the payload", t.name)));
        }
        expected_offset += n;
        let data = payload[t.offset * 8..(t.offset + n) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor2D::from_vec(t.shape[0], t.shape[1], data).map_err(|e| corrupt(path, e))?);
    }
    if expected_offset != manifest.payload_len {
        return Err(corrupt(path, "payload has unclaimed values"));
    }
    Ok((manifest, tensors))
}

/// Overwrites `store` with checkpoint tensors; names, shapes and trainable
/// tags must match one to one.
fn fill_store(path: &Path, store: &mut ParamStore, manifest: &Manifest, tensors: Vec<Tensor2D>) -> CliResult<()> {
    if manifest.tensors.len() != store.len() {
        return Err(corrupt(
            path,
            format!("{} tensors stored, model layout has {}", manifest.tensors.len(), store.len()),
        ));
    }
    for (entry, value) in manifest.tensors.iter().zip(tensors) {
        let id = store
            .find(&entry.name)
            .ok_or_else(|| corrupt(path, format!("unknown tensor '{}'", entry.name)))?;
        if store.value(id).shape() != value.shape() {
            return Err(corrupt(path, format!("tensor '{}' has the wrong shape", entry.name)));
        }
        *store.value_mut(id) = value;
        store.set_trainable(id, entry.trainable);
    }
    Ok(())
}

fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Data(format!("missing checkpoint {}", path.display()))
        } else {
            CliError::io(path, e)
        }
    })
}

pub fn model_bytes(model: &CmptModel, seed: u64, epoch: usize) -> Vec<u8> {
    encode(
        CheckpointKind::Model {
            spec: model.arch.spec.clone(),
        },
        &model.store,
        seed,
        epoch,
    )
}

pub fn save_model(path: &Path, model: &CmptModel, seed: u64, epoch: usize) -> CliResult<()> {
    write(path, &model_bytes(model, seed, epoch))
}

pub fn model_from_bytes(path: &Path, bytes: &[u8]) -> CliResult<(CmptModel, Manifest)> {
    let (manifest, tensors) = decode(path, bytes)?;
    let CheckpointKind::Model { spec } = &manifest.kind else {
        return Err(CliError::Data(format!("{}: not a model checkpoint", path.display())));
    };
    let mut model = CmptModel::build(spec, 0)?;
    fill_store(path, &mut model.store, &manifest, tensors)?;
    Ok((model, manifest))
}

pub fn load_model(path: &Path) -> CliResult<(CmptModel, Manifest)> {
    model_from_bytes(path, &read(path)?)
}

pub fn pretrained_bytes(p: &Pretrained, seed: u64, epoch: usize) -> Vec<u8> {
    encode(
        CheckpointKind::Pretrained {
            modality: p.modality,
            input: p.input,
            encoder: p.encoder_cfg.clone(),
        },
        &p.store,
        seed,
        epoch,
    )
}

pub fn save_pretrained(path: &Path, p: &Pretrained, seed: u64, epoch: usize) -> CliResult<()> {
    write(path, &pretrained_bytes(p, seed, epoch))
}

pub fn load_pretrained(path: &Path) -> CliResult<Pretrained> {
    let bytes = read(path)?;
    let (manifest, tensors) = decode(path, &bytes)?;
    let CheckpointKind::Pretrained { modality, input, encoder } = &manifest.kind else {
        return Err(CliError::Data(format!("{}: not a pretrained-encoder checkpoint", path.display())));
    };
    let mut p = Pretrained::build(*modality, *input, encoder, 0)?;
    fill_store(path, &mut p.store, &manifest, tensors)?;
    Ok(p)
}
