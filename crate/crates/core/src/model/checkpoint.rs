//! Checkpoints: a JSON manifest (`<stem>.json`) naming every tensor with its
//! shape, dtype and byte offset, plus a raw little-endian payload
//! (`<stem>.bin`).

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{DType, Scalar, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "volseg-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub model: String,
    pub payload: String,
    pub payload_bytes: u64,
    pub sha256: String,
    pub tensors: Vec<ManifestEntry>,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `<stem>.json` and `<stem>.bin`; returns the payload digest.
pub fn save_checkpoint<T: Scalar>(
    params: &ParamStore<T>,
    model: &str,
    stem: &Path,
) -> Result<String> {
    let (manifest_path, payload_path) = paths(stem);
    let mut payload = Vec::with_capacity(params.numel() as usize * T::DTYPE.size_of());
    let mut tensors = Vec::with_capacity(params.len());
    for p in params.iter() {
        tensors.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: T::DTYPE,
            offset: payload.len() as u64,
        });
        payload.extend(T::to_le_bytes_vec(p.value.data()));
    }
    let digest = hex(&Sha256::digest(&payload));
    let manifest = Manifest {
        format: FORMAT.into(),
        version: CHECKPOINT_VERSION,
        model: model.into(),
        payload: payload_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        payload_bytes: payload.len() as u64,
        sha256: digest.clone(),
        tensors,
    };
    if let Some(dir) = manifest_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&payload_path, &payload).map_err(|e| Error::io(&payload_path, e))?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))?;
    Ok(digest)
}

pub fn read_manifest(stem: &Path) -> Result<Manifest> {
    let (manifest_path, _) = paths(stem);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", manifest_path.display())))?;
    if m.format != FORMAT || m.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint {} v{} (expected {FORMAT} v{CHECKPOINT_VERSION})",
            m.format, m.version
        )));
    }
    Ok(m)
}

/// Overwrites every value in `params` from the checkpoint at `stem`. The
/// stored name set and shapes must match exactly; values stored at another
/// precision are converted.
pub fn load_checkpoint<T: Scalar>(params: &mut ParamStore<T>, stem: &Path) -> Result<Manifest> {
    let manifest = read_manifest(stem)?;
    let expected: BTreeSet<&str> = params.names().into_iter().collect();
    let found: BTreeSet<&str> = manifest.tensors.iter().map(|t| t.name.as_str()).collect();
    let missing: Vec<String> = expected.difference(&found).map(|s| s.to_string()).collect();
    let unexpected: Vec<String> = found.difference(&expected).map(|s| s.to_string()).collect();
    let shape_mismatch: Vec<String> = manifest
        .tensors
        .iter()
        .filter_map(|t| {
            let have = params.get(&t.name)?;
            (have.shape() != t.shape.as_slice()).then(|| {
                format!(
                    "{} (model {:?}, checkpoint {:?})",
                    t.name,
                    have.shape(),
                    t.shape
                )
            })
        })
        .collect();
    if !missing.is_empty() || !unexpected.is_empty() || !shape_mismatch.is_empty() {
        return Err(Error::ParamMismatch {
            missing,
            unexpected,
            shape_mismatch,
        });
    }

    let payload_path = stem.with_file_name(&manifest.payload);
    let payload = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    if payload.len() as u64 != manifest.payload_bytes {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, manifest says {}",
            payload.len(),
            manifest.payload_bytes
        )));
    }
    let digest = hex(&Sha256::digest(&payload));
    if digest != manifest.sha256 {
        return Err(Error::Checkpoint(format!(
            "payload digest {digest} does not match manifest {}",
            manifest.sha256
        )));
    }
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + n * entry.dtype.size_of();
        let bytes = payload
            .get(start..end)
            .ok_or_else(|| Error::Checkpoint(format!("{} lies outside the payload", entry.name)))?;
        let values: Tensor<T> = match entry.dtype {
            DType::F32 => Tensor::new(entry.shape.clone(), f32::from_le_bytes_slice(bytes))?.cast(),
            DType::F64 => Tensor::new(entry.shape.clone(), f64::from_le_bytes_slice(bytes))?.cast(),
        };
        *params.get_mut(&entry.name).expect("name checked above") = values;
    }
    Ok(manifest)
}
