//! Manifest + blob checkpoint format.
//!
//! A checkpoint at path `p` is the pair `p.json` (UTF-8 JSON manifest) and
//! `p.bin` (concatenated little-endian `f32` arrays). Tensor entries are listed
//! in blob order; offsets ascend with no gaps.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{DualEncoder, EncoderConfig, FfnSnapshot, FfnWeights, Phase};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Dense,
    Snapshot,
    Moe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub config: EncoderConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_experts: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    pub fn new(kind: CheckpointKind, config: EncoderConfig) -> Self {
        Manifest {
            format_version: FORMAT_VERSION,
            kind,
            config,
            phase: None,
            stage_id: None,
            num_experts: None,
            top_k: None,
            tensors: Vec::new(),
        }
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn manifest_path(path: &Path) -> PathBuf {
    with_suffix(path, ".json")
}

pub fn blob_path(path: &Path) -> PathBuf {
    with_suffix(path, ".bin")
}

/// Writes `tensors` (name, value) in the given order; `manifest.tensors` is
/// overwritten.
pub fn write(path: &Path, mut manifest: Manifest, tensors: &[(String, &Tensor)]) -> Result<()> {
    let mut blob = Vec::new();
    manifest.tensors.clear();
    for (name, t) in tensors {
        let offset = blob.len() as u64;
        for &v in t.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        manifest.tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            byte_offset: offset,
            byte_length: blob.len() as u64 - offset,
        });
    }
    let mut json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::CorruptManifest(e.to_string()))?;
    json.push('\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mp = manifest_path(path);
    fs::write(&mp, json).map_err(|e| Error::io(&mp, e))?;
    let bp = blob_path(path);
    fs::write(&bp, blob).map_err(|e| Error::io(&bp, e))?;
    Ok(())
}

/// Reads and validates a checkpoint pair. Returned tensors are `F32`, in
/// manifest order.
pub fn read(path: &Path) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    let mp = manifest_path(path);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::CorruptManifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::CorruptManifest(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    let bp = blob_path(path);
    let blob = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;

    let mut expected_offset = 0u64;
    for e in &manifest.tensors {
        if e.dtype != "f32" {
            return Err(Error::CorruptManifest(format!(
                "tensor `{}` has dtype `{}`",
                e.name, e.dtype
            )));
        }
        if e.byte_offset != expected_offset {
            return Err(Error::CorruptManifest(format!(
                "tensor `{}` starts at {}, expected {expected_offset}",
                e.name, e.byte_offset
            )));
        }
        let numel: usize = e.shape.iter().product();
        if e.byte_length != 4 * numel as u64 {
            return Err(Error::ShapeMismatch {
                tensor: e.name.clone(),
                reason: format!(
                    "declared shape {:?} needs {} bytes, entry has {}",
                    e.shape,
                    4 * numel,
                    e.byte_length
                ),
            });
        }
        expected_offset += e.byte_length;
    }
    let expected = expected_offset as usize;
    if blob.len() < expected {
        return Err(Error::TruncatedBlob {
            expected,
            actual: blob.len(),
        });
    }
    if blob.len() > expected {
        return Err(Error::CorruptManifest(format!(
            "blob has {} trailing bytes",
            blob.len() - expected
        )));
    }

    let mut seen = std::collections::HashSet::new();
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        if !seen.insert(e.name.as_str()) {
            return Err(Error::CorruptManifest(format!("duplicate tensor `{}`", e.name)));
        }
        let start = e.byte_offset as usize;
        let bytes = &blob[start..start + e.byte_length as usize];
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data, DType::F32)?));
    }
    Ok((manifest, tensors))
}

/// Checks a loaded tensor list against an expected `(name, shape)` layout.
pub(crate) fn match_layout(
    tensors: Vec<(String, Tensor)>,
    expected: &[(String, Vec<usize>)],
) -> Result<Vec<Tensor>> {
    if tensors.len() != expected.len() {
        return Err(Error::CorruptManifest(format!(
            "manifest lists {} tensors, model expects {}",
            tensors.len(),
            expected.len()
        )));
    }
    let mut by_name: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
    let mut out = Vec::with_capacity(expected.len());
    for (name, shape) in expected {
        let t = by_name
            .remove(name)
            .ok_or_else(|| Error::CorruptManifest(format!("missing tensor `{name}`")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                tensor: name.clone(),
                reason: format!("declared {:?}, model expects {shape:?}", t.shape()),
            });
        }
        out.push(t);
    }
    Ok(out)
}

fn expect_kind(manifest: &Manifest, kind: CheckpointKind) -> Result<()> {
    if manifest.kind != kind {
        return Err(Error::CorruptManifest(format!(
            "expected a {kind:?} checkpoint, found {:?}",
            manifest.kind
        )));
    }
    manifest.config.validate().map_err(|e| Error::CorruptManifest(e.to_string()))
}

pub fn save_model(model: &DualEncoder, path: &Path) -> Result<()> {
    let mut manifest = Manifest::new(CheckpointKind::Dense, model.config.clone());
    manifest.phase = Some(model.phase());
    let tensors: Vec<_> = model
        .store
        .iter()
        .map(|(_, p)| (p.name.clone(), &p.value))
        .collect();
    write(path, manifest, &tensors)
}

pub fn load_model(path: &Path) -> Result<DualEncoder> {
    let (manifest, tensors) = read(path)?;
    expect_kind(&manifest, CheckpointKind::Dense)?;
    let mut model = DualEncoder::new(manifest.config.clone(), DType::F32, 0)?;
    let expected: Vec<_> = model
        .store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.shape().to_vec()))
        .collect();
    let values = match_layout(tensors, &expected)?;
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    for (id, v) in ids.into_iter().zip(values) {
        model.store.get_mut(id).value = v;
    }
    model.set_phase(manifest.phase.unwrap_or(Phase::AllFrozen));
    Ok(model)
}

fn snapshot_layout(config: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    (0..config.num_blocks())
        .flat_map(|i| {
            config
                .ffn_shapes()
                .into_iter()
                .map(move |(n, s)| (format!("block_{i}.ffn.{n}"), s.to_vec()))
        })
        .collect()
}

pub fn save_snapshot(snapshot: &FfnSnapshot, config: &EncoderConfig, path: &Path) -> Result<()> {
    let mut manifest = Manifest::new(CheckpointKind::Snapshot, config.clone());
    manifest.stage_id = Some(snapshot.stage_id);
    let tensors: Vec<_> = snapshot
        .blocks
        .iter()
        .enumerate()
        .flat_map(|(i, w)| {
            w.tensors()
                .into_iter()
                .map(move |(n, t)| (format!("block_{i}.ffn.{n}"), t))
        })
        .collect();
    write(path, manifest, &tensors)
}

pub fn load_snapshot(path: &Path) -> Result<(FfnSnapshot, EncoderConfig)> {
    let (manifest, tensors) = read(path)?;
    expect_kind(&manifest, CheckpointKind::Snapshot)?;
    let stage_id = manifest
        .stage_id
        .ok_or_else(|| Error::CorruptManifest("snapshot without stage_id".into()))?;
    let values = match_layout(tensors, &snapshot_layout(&manifest.config))?;
    let mut it = values.into_iter();
    let blocks = (0..manifest.config.num_blocks())
        .map(|_| FfnWeights {
            w1: it.next().unwrap(),
            b1: it.next().unwrap(),
            w2: it.next().unwrap(),
            b2: it.next().unwrap(),
        })
        .collect();
    Ok((FfnSnapshot { stage_id, blocks }, manifest.config))
}
