//! Single-file checkpoint container.
//!
//! Layout: 4-byte magic, u32 LE format version, u64 LE manifest length,
//! JSON manifest (epoch, config snapshot, per-array name/shape/offset),
//! then raw little-endian f32 payloads at the recorded offsets.

use super::TrainConfig;
use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"SDCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct CheckpointBundle {
    pub version: u32,
    pub epoch: usize,
    pub config: TrainConfig,
    /// Model parameters and optimizer state, keyed by stable names.
    pub arrays: Vec<(String, ArrayD<f32>)>,
}

impl CheckpointBundle {
    pub fn array(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into the payload section.
    offset: u64,
    /// Element count.
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    epoch: usize,
    config: TrainConfig,
    arrays: Vec<ArrayEntry>,
}

pub fn save_checkpoint(bundle: &CheckpointBundle, path: &Path) -> Result<()> {
    let mut entries = Vec::with_capacity(bundle.arrays.len());
    let mut offset = 0u64;
    for (name, arr) in &bundle.arrays {
        entries.push(ArrayEntry {
            name: name.clone(),
            shape: arr.shape().to_vec(),
            dtype: "f32".to_string(),
            offset,
            len: arr.len() as u64,
        });
        offset += (arr.len() * 4) as u64;
    }
    let manifest = Manifest {
        version: bundle.version,
        epoch: bundle.epoch,
        config: bundle.config.clone(),
        arrays: entries,
    };
    let manifest_json = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;

    let mut buf =
        Vec::with_capacity(16 + manifest_json.len() + offset as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&bundle.version.to_le_bytes());
    buf.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&manifest_json);
    for (_, arr) in &bundle.arrays {
        let std = arr.as_standard_layout();
        for v in std.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointBundle> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    if data.len() < 16 {
        return Err(Error::Corrupt(format!(
            "{}: file too short for header ({} bytes)",
            path.display(),
            data.len()
        )));
    }
    if &data[0..4] != MAGIC {
        return Err(Error::Corrupt(format!(
            "{}: bad magic {:?}",
            path.display(),
            &data[0..4]
        )));
    }
    let version = u32::from_le_bytes(data[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let manifest_len = u64::from_le_bytes(data[8..16].try_into().unwrap()) as usize;
    let payload_start = 16 + manifest_len;
    if data.len() < payload_start {
        return Err(Error::Corrupt(format!(
            "{}: truncated manifest (need {manifest_len} bytes)",
            path.display()
        )));
    }
    let manifest: Manifest = serde_json::from_slice(&data[16..payload_start])
        .map_err(|e| Error::Corrupt(format!("{}: manifest parse: {e}", path.display())))?;

    let payload = &data[payload_start..];
    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    for entry in &manifest.arrays {
        if entry.dtype != "f32" {
            return Err(Error::Corrupt(format!(
                "{}: unsupported dtype {}",
                path.display(),
                entry.dtype
            )));
        }
        let start = entry.offset as usize;
        let nbytes = entry.len as usize * 4;
        if payload.len() < start + nbytes {
            return Err(Error::Corrupt(format!(
                "{}: truncated payload for array {} (need {} bytes at offset {})",
                path.display(),
                entry.name,
                nbytes,
                start
            )));
        }
        let expect_len: usize = entry.shape.iter().product::<usize>().max(1);
        if expect_len != entry.len as usize {
            return Err(Error::Corrupt(format!(
                "{}: array {} shape {:?} disagrees with element count {}",
                path.display(),
                entry.name,
                entry.shape,
                entry.len
            )));
        }
        let mut vals = Vec::with_capacity(entry.len as usize);
        for i in 0..entry.len as usize {
            let b = &payload[start + 4 * i..start + 4 * i + 4];
            vals.push(f32::from_le_bytes(b.try_into().unwrap()));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), vals)
            .map_err(|e| Error::Corrupt(format!("{}: array {}: {e}", path.display(), entry.name)))?;
        arrays.push((entry.name.clone(), arr));
    }
    Ok(CheckpointBundle {
        version: manifest.version,
        epoch: manifest.epoch,
        config: manifest.config,
        arrays,
    })
}
