//! Versioned named-tensor checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PSMC" | u32 version = 1 | u64 manifest_len | manifest (UTF-8 JSON) | payload
//! ```
//!
//! The manifest lists every tensor as `{name, dtype, shape, offset, byte_len}`
//! with offsets relative to the start of the payload, and carries the
//! checkpoint `kind` (`full` or `peft`), the SHA-256 of the frozen trunk and
//! the model configuration. A `peft` checkpoint holds only the adaptation
//! tensors and the classifier head; it can only be loaded on top of a backbone
//! whose trunk hash matches.

use super::{VitConfig, VitModel};
use crate::error::{Error, Result};
use crate::peft::{self, PeftConfig, PeftMethod};
use crate::tensor::{DType, Element, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"PSMC";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Full,
    Peft,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: CheckpointKind,
    pub backbone_sha256: String,
    pub vit_config: VitConfig,
    pub peft_config: Option<PeftConfig>,
    /// Free-form `key → value` record of how the checkpoint was produced.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub provenance: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

fn encode<T: Element>(manifest_base: Manifest, tensors: Vec<(String, &Tensor<T>)>) -> Result<Vec<u8>> {
    let mut manifest = manifest_base;
    let mut payload = Vec::new();
    for (name, t) in tensors {
        let bytes = t.to_le_bytes();
        manifest.tensors.push(TensorEntry {
            name,
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
            byte_len: bytes.len() as u64,
        });
        payload.extend_from_slice(&bytes);
    }
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Serialises every tensor of `model` (backbone and PEFT state).
pub fn encode_full<T: Element>(model: &VitModel<T>) -> Result<Vec<u8>> {
    encode_full_with(model, BTreeMap::new())
}

pub fn encode_full_with<T: Element>(model: &VitModel<T>, provenance: BTreeMap<String, String>) -> Result<Vec<u8>> {
    let mut refs = Vec::new();
    model.visit_params(&mut |name, t| refs.push((name.to_string(), t.clone())));
    let manifest = Manifest {
        kind: CheckpointKind::Full,
        backbone_sha256: model.backbone_sha256(),
        vit_config: model.config.clone(),
        peft_config: model.peft.as_ref().map(|p| p.config.clone()),
        provenance,
        tensors: Vec::new(),
    };
    encode(manifest, refs.iter().map(|(n, t)| (n.clone(), t)).collect())
}

/// Serialises only the adaptation tensors and the classifier head.
pub fn encode_peft<T: Element>(model: &VitModel<T>) -> Result<Vec<u8>> {
    encode_peft_with(model, BTreeMap::new())
}

pub fn encode_peft_with<T: Element>(model: &VitModel<T>, provenance: BTreeMap<String, String>) -> Result<Vec<u8>> {
    let state = match &model.peft {
        Some(s) if s.config.method != PeftMethod::Full && s.config.method != PeftMethod::None => s,
        _ => {
            return Err(Error::Checkpoint(format!(
                "a PEFT-only checkpoint needs a delta method, model has `{}`",
                model.peft_method()
            )))
        }
    };
    let mut refs: Vec<(String, Tensor<T>)> = Vec::new();
    state.visit(&mut |name, t| refs.push((name.to_string(), t.clone())));
    refs.push(("head.weight".into(), model.head.weight.clone()));
    refs.push(("head.bias".into(), model.head.bias.clone()));
    let manifest = Manifest {
        kind: CheckpointKind::Peft,
        backbone_sha256: model.backbone_sha256(),
        vit_config: model.config.clone(),
        peft_config: Some(state.config.clone()),
        provenance,
        tensors: Vec::new(),
    };
    encode(manifest, refs.iter().map(|(n, t)| (n.clone(), t)).collect())
}

pub fn save_checkpoint<T: Element>(model: &VitModel<T>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_full(model)?)
}

pub fn save_peft_checkpoint<T: Element>(model: &VitModel<T>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_peft(model)?)
}

/// Writes a `full` checkpoint for a model without delta state, a `peft` one
/// otherwise, recording `provenance` in the manifest.
pub fn save_with_provenance<T: Element>(
    model: &VitModel<T>,
    path: impl AsRef<Path>,
    provenance: BTreeMap<String, String>,
) -> Result<()> {
    let bytes = match model.peft_method() {
        PeftMethod::None | PeftMethod::Full => encode_full_with(model, provenance)?,
        _ => encode_peft_with(model, provenance)?,
    };
    write_atomic(path.as_ref(), &bytes)
}

/// Reads only the manifest of a checkpoint file.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    Ok(decode::<f32>(&read_file(path)?)?.manifest)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))
}

/// Parsed checkpoint: manifest plus decoded tensors by name.
#[derive(Debug)]
pub struct Decoded<T> {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, Tensor<T>>,
}

pub fn decode<T: Element>(bytes: &[u8]) -> Result<Decoded<T>> {
    if bytes.len() < 16 {
        return Err(Error::Checkpoint(format!("file of {} bytes is too short", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unknown format version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let rest = &bytes[16..];
    if mlen > rest.len() {
        return Err(Error::Checkpoint(format!(
            "manifest length {mlen} exceeds remaining {} bytes",
            rest.len()
        )));
    }
    let manifest: Manifest = serde_json::from_slice(&rest[..mlen])
        .map_err(|e| Error::Checkpoint(format!("unreadable manifest: {e}")))?;
    let payload = &rest[mlen..];
    let mut expected_len = 0u64;
    let mut tensors = BTreeMap::new();
    for e in &manifest.tensors {
        let numel: usize = e.shape.iter().product();
        if e.byte_len != (numel * e.dtype.size()) as u64 {
            return Err(Error::Checkpoint(format!(
                "`{}`: byte_len {} does not match shape {:?} as {:?}",
                e.name, e.byte_len, e.shape, e.dtype
            )));
        }
        let end = e.offset.saturating_add(e.byte_len);
        if end > payload.len() as u64 {
            return Err(Error::Checkpoint(format!(
                "`{}`: payload truncated ({} bytes, tensor ends at {end})",
                e.name,
                payload.len()
            )));
        }
        let raw = &payload[e.offset as usize..end as usize];
        let data: Vec<T> = match e.dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| T::from_f64(f32::read_le(c) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| T::from_f64(f64::read_le(c))).collect(),
        };
        expected_len = expected_len.max(end);
        let t = Tensor::new(e.shape.clone(), data)
            .map_err(|err| Error::Checkpoint(format!("`{}`: {err}", e.name)))?;
        if tensors.insert(e.name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{}`", e.name)));
        }
    }
    if expected_len != payload.len() as u64 {
        return Err(Error::Checkpoint(format!(
            "payload has {} bytes but the manifest describes {expected_len}",
            payload.len()
        )));
    }
    Ok(Decoded { manifest, tensors })
}

fn take<T: Element>(map: &mut BTreeMap<String, Tensor<T>>, name: &str, into: &mut Tensor<T>) -> Result<()> {
    let t = map
        .remove(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
    if t.shape() != into.shape() {
        return Err(Error::Checkpoint(format!(
            "`{name}` has shape {:?}, model expects {:?}",
            t.shape(),
            into.shape()
        )));
    }
    let flag = into.requires_grad();
    *into = t.with_requires_grad(flag);
    Ok(())
}

fn fill_peft<T: Element>(model: &mut VitModel<T>, map: &mut BTreeMap<String, Tensor<T>>) -> Result<()> {
    let mut err = None;
    if let Some(state) = &mut model.peft {
        state.visit_mut(&mut |name, t| {
            if err.is_none() {
                err = take(map, name, t).err();
            }
        });
    }
    err.map_or(Ok(()), Err)
}

/// Loads a `full` checkpoint. A model without PEFT state comes back frozen;
/// one with PEFT state gets the trainable flags `attach` would set.
pub fn load_checkpoint<T: Element>(path: impl AsRef<Path>) -> Result<VitModel<T>> {
    let bytes = read_file(path.as_ref())?;
    let Decoded { manifest, mut tensors } = decode::<T>(&bytes)?;
    if manifest.kind != CheckpointKind::Full {
        return Err(Error::Checkpoint(
            "this is a PEFT-only checkpoint; load it with load_peft_checkpoint".into(),
        ));
    }
    let mut model = VitModel::<T>::new(manifest.vit_config.clone(), 0)
        .map_err(|e| Error::Checkpoint(format!("manifest config: {e}")))?;
    if let Some(pc) = &manifest.peft_config {
        model = peft::attach(model, pc, 0)?;
    } else {
        model.freeze();
    }
    let mut err = None;
    model.visit_backbone_mut(&mut |name, t| {
        if err.is_none() {
            err = take(&mut tensors, name, t).err();
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    fill_peft(&mut model, &mut tensors)?;
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
    }
    if model.backbone_sha256() != manifest.backbone_sha256 {
        return Err(Error::Checkpoint("stored backbone hash does not match the tensors".into()));
    }
    Ok(model)
}

/// Applies a PEFT-only checkpoint on top of `backbone`.
pub fn load_peft_checkpoint<T: Element>(path: impl AsRef<Path>, backbone: VitModel<T>) -> Result<VitModel<T>> {
    let bytes = read_file(path.as_ref())?;
    let Decoded { manifest, mut tensors } = decode::<T>(&bytes)?;
    if manifest.kind != CheckpointKind::Peft {
        return Err(Error::Checkpoint("expected a PEFT-only checkpoint".into()));
    }
    if backbone.backbone_sha256() != manifest.backbone_sha256 {
        return Err(Error::Checkpoint(
            "backbone hash mismatch: these deltas were trained on a different backbone".into(),
        ));
    }
    let pc = manifest
        .peft_config
        .ok_or_else(|| Error::Checkpoint("PEFT checkpoint without peft_config".into()))?;
    let mut backbone = backbone;
    backbone.peft = None;
    if let Some(h) = tensors.get("head.weight") {
        let classes = h.shape()[0];
        if classes != backbone.config.num_classes {
            backbone.reset_head(classes, 0)?;
        }
    }
    let mut model = peft::attach(backbone, &pc, 0)?;
    fill_peft(&mut model, &mut tensors)?;
    take(&mut tensors, "head.weight", &mut model.head.weight)?;
    take(&mut tensors, "head.bias", &mut model.head.bias)?;
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> VitConfig {
        VitConfig {
            image_size: 8,
            channels: 1,
            patch_size: 4,
            embed_dim: 8,
            num_heads: 2,
            depth: 1,
            mlp_ratio: 2,
            num_classes: 3,
        }
    }

    #[test]
    fn header_layout() {
        let m = VitModel::<f32>::new(tiny(), 1).unwrap();
        let bytes = encode_full(&m).unwrap();
        assert_eq!(&bytes[..4], b"PSMC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let manifest: serde_json::Value = serde_json::from_slice(&bytes[16..16 + mlen]).unwrap();
        assert_eq!(manifest["kind"], "full");
        assert_eq!(manifest["tensors"][0]["name"], "patch.weight");
        assert_eq!(manifest["tensors"][0]["offset"], 0);
        assert_eq!(manifest["tensors"][0]["dtype"], "f32");
    }

    #[test]
    fn truncated_and_corrupt_inputs_fail() {
        let m = VitModel::<f32>::new(tiny(), 1).unwrap();
        let bytes = encode_full(&m).unwrap();
        assert!(decode::<f32>(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode::<f32>(&bad).unwrap_err().to_string().contains("version"));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<f32>(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode::<f32>(&long).is_err());
    }
}
