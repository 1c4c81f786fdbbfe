//! Checkpoints: a JSON manifest plus a little-endian `f64` blob stored next to it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{MhnError, Result};
use crate::model::{Mhn, ModelSpec};
use crate::tensor::ParamStore;

pub const CHECKPOINT_FORMAT: &str = "mhn-checkpoint-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub spec: ModelSpec,
    pub step: u64,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub params: Vec<ParamEntry>,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `<path>` (manifest) and `<path with .bin extension>` (values).
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    spec: &ModelSpec,
    store: &ParamStore,
    step: u64,
) -> Result<()> {
    let path = path.as_ref();
    let blob = blob_path(path);
    let mut bytes = Vec::with_capacity(store.count() * 8);
    let mut params = Vec::with_capacity(store.len());
    for (_, name, t) in store.iter() {
        params.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape.clone(),
            offset: bytes.len() as u64,
        });
        for v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        spec: spec.clone(),
        step,
        blob: blob
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| {
                MhnError::Contract(format!(
                    "checkpoint path {} has no file name",
                    path.display()
                ))
            })?
            .to_string(),
        params,
    };
    std::fs::write(&blob, &bytes).map_err(|e| MhnError::io(&blob, e))?;
    super::qa::write_json(path, &manifest)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let m: Manifest = super::qa::read_json(path)?;
    if m.format != CHECKPOINT_FORMAT {
        return Err(MhnError::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("unknown checkpoint format {:?}", m.format),
        });
    }
    Ok(m)
}

/// Copies checkpoint values into an existing store. Names and shapes must match exactly.
pub fn load_into(path: impl AsRef<Path>, store: &mut ParamStore) -> Result<Manifest> {
    let path = path.as_ref();
    let manifest = read_manifest(path)?;
    let mut problems = Vec::new();
    for e in &manifest.params {
        match store.by_name(&e.name) {
            None => problems.push(format!("`{}` is not a model parameter", e.name)),
            Some(t) if t.shape != e.shape => problems.push(format!(
                "`{}` has shape {:?}, model expects {:?}",
                e.name, e.shape, t.shape
            )),
            _ => {}
        }
    }
    for (_, name, _) in store.iter() {
        if !manifest.params.iter().any(|e| e.name == name) {
            problems.push(format!("`{name}` is missing from the checkpoint"));
        }
    }
    if !problems.is_empty() {
        let total = problems.len();
        problems.truncate(3);
        return Err(MhnError::Contract(format!(
            "checkpoint {} does not match the model ({total} mismatches; first: {})",
            path.display(),
            problems.join("; ")
        )));
    }

    let blob = path.with_file_name(&manifest.blob);
    let bytes = std::fs::read(&blob).map_err(|e| MhnError::io(&blob, e))?;
    let mut spans: Vec<(u64, u64, &str)> = Vec::new();
    for e in &manifest.params {
        let n = e.shape.iter().product::<usize>() as u64 * 8;
        let end = e.offset + n;
        if end > bytes.len() as u64 {
            return Err(MhnError::Format {
                path: blob.clone(),
                offset: e.offset,
                message: format!(
                    "`{}` needs bytes {}..{end}, blob has {}",
                    e.name,
                    e.offset,
                    bytes.len()
                ),
            });
        }
        spans.push((e.offset, end, &e.name));
    }
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(MhnError::Format {
                path: blob.clone(),
                offset: w[1].0,
                message: format!("`{}` overlaps `{}`", w[1].2, w[0].2),
            });
        }
    }
    for e in &manifest.params {
        let id = store.id(&e.name).expect("checked above");
        let t = store.get_mut(id);
        let start = e.offset as usize;
        for (i, v) in t.data.iter_mut().enumerate() {
            let at = start + 8 * i;
            *v = f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8-byte slice"));
        }
    }
    Ok(manifest)
}

/// Rebuilds the model recorded in the manifest and loads its values.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Mhn, ParamStore, Manifest)> {
    let path = path.as_ref();
    let manifest = read_manifest(path)?;
    let (model, mut store) = Mhn::new(manifest.spec.clone(), 0)?;
    let manifest = load_into(path, &mut store)?;
    Ok((model, store, manifest))
}
