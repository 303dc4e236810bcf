//! Checkpoint file: `SFBN` magic, u32 version, u32 manifest length, a JSON
//! manifest of `{name, shape, offset}` entries (offset in f32 elements),
//! then the little-endian f32 blob. Parameters come first in registry
//! order, followed by running statistics.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SfbNet;
use crate::engine::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::layers::Module;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SFBN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    entries: Vec<CheckpointEntry>,
}

pub fn save_checkpoint<T: Scalar>(model: &SfbNet<T>, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0;
    let mut push = |name: &str, t: &Tensor<T>| {
        entries.push(CheckpointEntry {
            name: name.to_owned(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
        for v in t.data() {
            blob.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    };
    model.visit_params(&mut |p| push(&p.name, &p.value));
    model.visit_buffers(&mut |n, t| push(n, t));
    let manifest = serde_json::to_vec(&Manifest { entries })?;
    let mut bytes = Vec::with_capacity(12 + manifest.len() + blob.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&manifest);
    bytes.extend_from_slice(&blob);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Parses a checkpoint into named tensors.
pub fn read_checkpoint(path: &Path) -> Result<Vec<(CheckpointEntry, Vec<f32>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Data(format!("{}: {m}", path.display()));
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("missing SFBN magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let mlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let blob_start = 12 + mlen;
    if bytes.len() < blob_start {
        return Err(bad("truncated manifest"));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[12..blob_start])?;
    let blob = &bytes[blob_start..];
    if blob.len() % 4 != 0 {
        return Err(bad("blob is not a whole number of f32 values"));
    }
    let floats: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    manifest
        .entries
        .into_iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let end = e.offset.checked_add(n).filter(|&end| end <= floats.len());
            match end {
                Some(end) => {
                    let data = floats[e.offset..end].to_vec();
                    Ok((e, data))
                }
                None => Err(bad(&format!("entry {} runs past the blob", e.name))),
            }
        })
        .collect()
}

/// Loads a checkpoint into `model`; every parameter and buffer must be
/// present with a matching shape.
pub fn load_checkpoint<T: Scalar>(model: &mut SfbNet<T>, path: &Path) -> Result<()> {
    let mut by_name: HashMap<String, (Vec<usize>, Vec<f32>)> = read_checkpoint(path)?
        .into_iter()
        .map(|(e, d)| (e.name, (e.shape, d)))
        .collect();
    let mut problems = Vec::new();
    let mut assign = |name: &str, t: &mut Tensor<T>| match by_name.remove(name) {
        Some((shape, data)) if shape == t.shape() => {
            for (dst, &src) in t.data_mut().iter_mut().zip(&data) {
                *dst = T::lit(src as f64);
            }
        }
        Some((shape, _)) => problems.push(format!(
            "{name}: checkpoint shape {:?} vs model {:?}",
            shape,
            t.shape()
        )),
        None => problems.push(format!("{name}: missing from checkpoint")),
    };
    model.visit_params_mut(&mut |p| {
        let name = p.name.clone();
        assign(&name, &mut p.value)
    });
    model.visit_buffers_mut(&mut |n, t| assign(n, t));
    if !by_name.is_empty() {
        let mut extra: Vec<_> = by_name.keys().cloned().collect();
        extra.sort();
        problems.push(format!("unexpected entries: {}", extra.join(", ")));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "checkpoint {} does not match the model configuration: {}",
            path.display(),
            problems.join("; ")
        )))
    }
}
