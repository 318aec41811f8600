//! On-disk checkpoints: `<stem>.json` manifest plus `<stem>.bin`, a flat
//! little-endian f64 blob in manifest layer order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub layers: Vec<LayerEntry>,
    pub hyperparameters: serde_json::Value,
    pub seed: u64,
    pub loss_trace: Vec<f64>,
    pub blob_len: u64,
    pub sha256: String,
}

/// Writes `bytes` to a temporary sibling, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp~");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.json")), dir.join(format!("{stem}.bin")))
}

pub fn save(
    dir: &Path,
    stem: &str,
    kind: &str,
    hyperparameters: serde_json::Value,
    seed: u64,
    loss_trace: &[f64],
    layers: &[(String, &Tensor)],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let blob: Vec<u8> = layers
        .iter()
        .flat_map(|(_, t)| t.data().iter().flat_map(|v| v.to_le_bytes()))
        .collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        layers: layers
            .iter()
            .map(|(name, t)| LayerEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        hyperparameters,
        seed,
        loss_trace: loss_trace.to_vec(),
        blob_len: blob.len() as u64,
        sha256: sha256_hex(&blob),
    };
    let (json, bin) = paths(dir, stem);
    write_atomic(&bin, &blob)?;
    write_json(&json, &manifest)
}

/// Reads and verifies a checkpoint. Length or digest mismatches are
/// [`Error::Checksum`]; a wrong `kind` or format version is
/// [`Error::Compatibility`].
pub fn load(dir: &Path, stem: &str, kind: &str) -> Result<(Manifest, Vec<Tensor>)> {
    let (json, bin) = paths(dir, stem);
    let manifest: Manifest = read_json(&json)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Compatibility(format!(
            "{} has format version {}, expected {FORMAT_VERSION}",
            json.display(),
            manifest.format_version
        )));
    }
    if manifest.kind != kind {
        return Err(Error::Compatibility(format!(
            "{} holds a {} checkpoint, expected {kind}",
            json.display(),
            manifest.kind
        )));
    }
    let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let want: usize = manifest.layers.iter().map(|l| l.shape.iter().product::<usize>()).sum();
    if blob.len() as u64 != manifest.blob_len || blob.len() != want * 8 || sha256_hex(&blob) != manifest.sha256 {
        return Err(Error::Checksum(bin));
    }
    let mut values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let tensors = manifest
        .layers
        .iter()
        .map(|l| {
            let n = l.shape.iter().product();
            Tensor::new(l.shape.clone(), values.by_ref().take(n).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, tensors))
}
