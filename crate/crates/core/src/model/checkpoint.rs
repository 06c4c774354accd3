//! Checkpoint serialization: a JSON manifest describing every named tensor
//! plus one little-endian raw blob, written as `<stem>.json` / `<stem>.bin`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::scalar::Real;
use crate::tensor::Tensor;

const MAGIC: &str = "RELCONV-CKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    /// "param", "adam_m", "adam_v", or "buffer".
    kind: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: u64,
    /// Optimizer step count; present on "param" entries only.
    #[serde(skip_serializing_if = "Option::is_none")]
    adam_t: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    magic: String,
    version: u32,
    dtype: String,
    config: ModelConfig,
    entries: Vec<ManifestEntry>,
}

pub fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

pub fn blob_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

fn append<T: Real>(
    blob: &mut Vec<u8>,
    entries: &mut Vec<ManifestEntry>,
    name: &str,
    kind: &str,
    tensor: &Tensor<T>,
    adam_t: Option<u64>,
) {
    entries.push(ManifestEntry {
        name: name.to_string(),
        kind: kind.to_string(),
        shape: tensor.shape().to_vec(),
        offset: blob.len() as u64,
        adam_t,
    });
    for &v in tensor.data() {
        v.write_le(blob);
    }
}

/// Write `<stem>.json` and `<stem>.bin`. Entry order follows parameter
/// visit order and is deterministic, so identical models produce identical
/// files.
pub fn save<T: Real>(model: &Model<T>, stem: &Path) -> Result<()> {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for p in model.parameters() {
        append(&mut blob, &mut entries, &p.name, "param", &p.value, Some(p.adam_t));
        append(&mut blob, &mut entries, &p.name, "adam_m", &p.adam_m, None);
        append(&mut blob, &mut entries, &p.name, "adam_v", &p.adam_v, None);
    }
    for (name, buf) in model.buffers() {
        append(&mut blob, &mut entries, &name, "buffer", buf, None);
    }
    let manifest = Manifest {
        magic: MAGIC.to_string(),
        version: VERSION,
        dtype: T::DTYPE.to_string(),
        config: model.config.clone(),
        entries,
    };
    let mpath = manifest_path(stem);
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Json { path: mpath.clone(), source: e })?;
    if let Some(parent) = stem.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    let bpath = blob_path(stem);
    std::fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))
}

fn read_tensor<T: Real>(blob: &[u8], entry: &ManifestEntry, stem: &Path) -> Result<Tensor<T>> {
    let numel: usize = entry.shape.iter().product();
    let start = entry.offset as usize;
    let end = start + numel * T::BYTES;
    if end > blob.len() {
        return Err(Error::Checkpoint(format!(
            "{}: entry '{}' ({}) overruns blob of {} bytes",
            stem.display(),
            entry.name,
            entry.kind,
            blob.len()
        )));
    }
    let data = blob[start..end]
        .chunks(T::BYTES)
        .map(T::read_le)
        .collect();
    Tensor::new(entry.shape.clone(), data)
}

/// Rebuild a model from `<stem>.json` / `<stem>.bin`, restoring parameter
/// values, Adam state, and batch-norm running buffers.
pub fn load<T: Real>(stem: &Path) -> Result<Model<T>> {
    let mpath = manifest_path(stem);
    let json = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&json)
        .map_err(|e| Error::Json { path: mpath.clone(), source: e })?;
    if manifest.magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic '{}'",
            mpath.display(),
            manifest.magic
        )));
    }
    if manifest.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {}",
            mpath.display(),
            manifest.version
        )));
    }
    if manifest.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "{}: dtype is {}, expected {}",
            mpath.display(),
            manifest.dtype,
            T::DTYPE
        )));
    }
    let bpath = blob_path(stem);
    let blob = std::fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let mut model: Model<T> = Model::new(manifest.config.clone())?;

    let find = |name: &str, kind: &str| -> Result<&ManifestEntry> {
        manifest
            .entries
            .iter()
            .find(|e| e.name == name && e.kind == kind)
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "{}: missing entry '{}' ({})",
                    mpath.display(),
                    name,
                    kind
                ))
            })
    };
    let check_shape = |entry: &ManifestEntry, want: &[usize]| -> Result<()> {
        if entry.shape != want {
            return Err(Error::Checkpoint(format!(
                "{}: entry '{}' ({}) has shape {:?}, expected {:?}",
                mpath.display(),
                entry.name,
                entry.kind,
                entry.shape,
                want
            )));
        }
        Ok(())
    };

    for p in model.parameters_mut() {
        let entry = find(&p.name, "param")?;
        check_shape(entry, p.value.shape())?;
        p.value = read_tensor(&blob, entry, stem)?;
        p.adam_t = entry.adam_t.unwrap_or(0);
        let entry = find(&p.name, "adam_m")?;
        check_shape(entry, p.adam_m.shape())?;
        p.adam_m = read_tensor(&blob, entry, stem)?;
        let entry = find(&p.name, "adam_v")?;
        check_shape(entry, p.adam_v.shape())?;
        p.adam_v = read_tensor(&blob, entry, stem)?;
        p.grad = None;
    }
    for (name, buf) in model.buffers_mut() {
        let entry = find(&name, "buffer")?;
        check_shape(entry, buf.shape())?;
        *buf = read_tensor(&blob, entry, stem)?;
    }
    let expected = model.parameters().len() * 3 + model.buffers().len();
    if manifest.entries.len() != expected {
        return Err(Error::Checkpoint(format!(
            "{}: {} entries, expected {}",
            mpath.display(),
            manifest.entries.len(),
            expected
        )));
    }
    Ok(model)
}
