//! On-disk tensor archive for checkpoints.
//!
//! Layout: an 8-byte magic, a little-endian `u32` format version, a
//! little-endian `u64` header length, a JSON header listing tensor names,
//! kinds and shapes in payload order, then the raw little-endian `f32`
//! payload. Writes go through a temp file and rename, so a crash never
//! leaves a half-written checkpoint behind.

use std::path::Path;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::util::atomic_write;

const MAGIC: &[u8; 8] = b"CVAXARCH";
const VERSION: u32 = 1;

/// Which slot of a parameter a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Value,
    AdamM,
    AdamV,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    kind: TensorKind,
    shape: [usize; 4],
}

#[derive(Serialize, Deserialize)]
struct ArchiveHeader {
    tensors: Vec<TensorMeta>,
}

/// Serialise named tensors in the given order.
pub fn write_tensor_archive(
    path: &Path,
    tensors: &[(String, TensorKind, &Array4<f32>)],
) -> Result<()> {
    let header = ArchiveHeader {
        tensors: tensors
            .iter()
            .map(|(name, kind, arr)| {
                let s = arr.shape();
                TensorMeta {
                    name: name.clone(),
                    kind: *kind,
                    shape: [s[0], s[1], s[2], s[3]],
                }
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let payload_len: usize = tensors.iter().map(|(_, _, a)| a.len() * 4).sum();
    let mut buf = Vec::with_capacity(8 + 4 + 8 + header_json.len() + payload_len);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for (_, _, arr) in tensors {
        for &v in arr.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    atomic_write(path, &buf).map_err(|e| {
        Error::Checkpoint(format!("cannot write archive {}: {e}", path.display()))
    })
}

/// Read an archive back; tensors come out in payload order.
pub fn read_tensor_archive(path: &Path) -> Result<Vec<(String, TensorKind, Array4<f32>)>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read archive {}: {e}", path.display())))?;
    let fail = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 20 {
        return Err(fail("truncated before header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(fail("bad magic (not a tensor archive)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(fail(&format!("unsupported archive version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| fail("truncated header"))?;
    let header: ArchiveHeader = serde_json::from_slice(&bytes[20..header_end])
        .map_err(|e| fail(&format!("bad header JSON: {e}")))?;

    let mut out = Vec::with_capacity(header.tensors.len());
    let mut off = header_end;
    for meta in header.tensors {
        let numel: usize = meta
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| fail("tensor shape overflows"))?;
        let nbytes = numel
            .checked_mul(4)
            .filter(|&nb| off + nb <= bytes.len())
            .ok_or_else(|| fail(&format!("truncated payload for tensor {:?}", meta.name)))?;
        let mut data = Vec::with_capacity(numel);
        for chunk in bytes[off..off + nbytes].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        off += nbytes;
        let arr = Array4::from_shape_vec(meta.shape, data)
            .map_err(|e| fail(&format!("shape mismatch for {:?}: {e}", meta.name)))?;
        out.push((meta.name, meta.kind, arr));
    }
    if off != bytes.len() {
        return Err(fail("trailing bytes after payload"));
    }
    Ok(out)
}

impl ParamStore<f32> {
    /// Save every parameter with its Adam moments.
    pub fn save_archive(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::with_capacity(self.len() * 3);
        for (name, e) in self.iter() {
            tensors.push((name.to_string(), TensorKind::Value, &e.value));
            tensors.push((name.to_string(), TensorKind::AdamM, &e.adam_m));
            tensors.push((name.to_string(), TensorKind::AdamV, &e.adam_v));
        }
        write_tensor_archive(path, &tensors)
    }

    /// Rebuild a store from an archive. Moments are optional (an archive
    /// holding only values loads with zeroed optimiser state); a moment
    /// without its value, or a shape mismatch, is an error.
    pub fn load_archive(path: &Path) -> Result<Self> {
        let tensors = read_tensor_archive(path)?;
        let mut store = ParamStore::<f32>::new();
        for (name, kind, arr) in &tensors {
            if *kind == TensorKind::Value {
                store.declare(name, arr.clone())?;
            }
        }
        for (name, kind, arr) in tensors {
            if kind == TensorKind::Value {
                continue;
            }
            let e = store.entry_mut(&name).map_err(|_| {
                Error::Checkpoint(format!(
                    "archive {} holds optimiser state for unknown parameter {name:?}",
                    path.display()
                ))
            })?;
            if e.value.shape() != arr.shape() {
                return Err(Error::Checkpoint(format!(
                    "optimiser state shape mismatch for {name:?}"
                )));
            }
            match kind {
                TensorKind::AdamM => e.adam_m = arr,
                TensorKind::AdamV => e.adam_v = arr,
                TensorKind::Value => unreachable!(),
            }
        }
        Ok(store)
    }
}
