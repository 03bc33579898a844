//! Versioned named-tensor container used for checkpoints and optional
//! pretrained weight files.
//!
//! Layout: 8-byte magic, little-endian u64 header length, JSON header
//! (metadata plus an ordered tensor index of names and shapes), then the
//! raw f64 little-endian tensor data in index order. Exact byte
//! round-trip, so resumed runs are bit-identical.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Layer, Slot};

const MAGIC: &[u8; 8] = b"AVTOPOC1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<TensorInfo>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

pub struct NamedTensors {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

pub fn save_named(path: &Path, meta: serde_json::Value, tensors: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
    let header = Header {
        version: 1,
        meta,
        tensors: tensors
            .iter()
            .map(|(name, shape, _)| TensorInfo {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("cannot encode header: {e}")))?;
    let mut f = fs::File::create(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let werr = |e: std::io::Error| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    f.write_all(MAGIC).map_err(werr)?;
    f.write_all(&(header_bytes.len() as u64).to_le_bytes()).map_err(werr)?;
    f.write_all(&header_bytes).map_err(werr)?;
    for (_, shape, data) in tensors {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut buf = Vec::with_capacity(data.len() * 8);
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&buf).map_err(werr)?;
    }
    Ok(())
}

pub fn load_named(path: &Path) -> Result<NamedTensors> {
    let mut f = fs::File::open(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let rerr = |e: std::io::Error| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(rerr)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes).map_err(rerr)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes).map_err(rerr)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("corrupt header in {}: {e}", path.display())))?;
    if header.version != 1 {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for info in header.tensors {
        let n: usize = info.shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        f.read_exact(&mut buf).map_err(rerr)?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((info.name, info.shape, data));
    }
    Ok(NamedTensors {
        meta: header.meta,
        tensors,
    })
}

/// Snapshots every parameter and buffer of a network under `prefix`.
pub fn collect_named(net: &mut dyn Layer, prefix: &str) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    net.visit(prefix, &mut |name, slot| {
        let value = match slot {
            Slot::Param { value, .. } => value,
            Slot::Buffer { value } => value,
        };
        out.push((
            name.to_string(),
            value.shape().to_vec(),
            value.iter().copied().collect(),
        ));
    });
    out
}

/// Writes stored tensors back into a network's slots. Every slot the
/// network exposes under `prefix` must be present with a matching shape.
pub fn assign_named(
    net: &mut dyn Layer,
    prefix: &str,
    stored: &HashMap<String, (Vec<usize>, Vec<f64>)>,
) -> Result<()> {
    let mut missing = Vec::new();
    let mut shape_err = None;
    net.visit(prefix, &mut |name, slot| {
        let mut value = match slot {
            Slot::Param { value, .. } => value,
            Slot::Buffer { value } => value,
        };
        match stored.get(name) {
            None => missing.push(name.to_string()),
            Some((shape, data)) => {
                if shape.as_slice() != value.shape() {
                    shape_err = Some(format!(
                        "tensor {name}: stored shape {:?} vs model shape {:?}",
                        shape,
                        value.shape()
                    ));
                } else {
                    for (dst, src) in value.iter_mut().zip(data.iter()) {
                        *dst = *src;
                    }
                }
            }
        }
    });
    if let Some(e) = shape_err {
        return Err(Error::Checkpoint(e));
    }
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "missing tensors in weight file: {}",
            missing.join(", ")
        )));
    }
    Ok(())
}

/// Loads a weight file into a network; used by the pretrained-weight
/// hooks. Absent or malformed files are hard errors.
pub fn load_weights_into(path: &Path, net: &mut dyn Layer, prefix: &str) -> Result<()> {
    let loaded = load_named(path)?;
    let map: HashMap<String, (Vec<usize>, Vec<f64>)> = loaded
        .tensors
        .into_iter()
        .map(|(n, s, d)| (n, (s, d)))
        .collect();
    assign_named(net, prefix, &map)
}
