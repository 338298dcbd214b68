//! Checkpoint file: a version-tagged flat map of named parameter tensors
//! plus the config snapshot the model was built with.
//!
//! Layout: magic `TSCK`, u32 version, u64 JSON header length, the JSON
//! header (`config` plus an ordered tensor manifest of names and shapes),
//! then raw little-endian f64 tensor data in manifest order.

use super::SpotModel;
use crate::config::SpotConfig;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"TSCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint {path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error("checkpoint/config mismatch: {0}")]
    Mismatch(String),
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: SpotConfig,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(path: &Path, model: &SpotModel, cfg: &SpotConfig) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io { path: path.display().to_string(), source };
    let header = Header {
        config: cfg.clone(),
        tensors: model
            .store
            .iter()
            .map(|(_, name, v)| TensorEntry { name: name.to_string(), shape: v.shape().to_vec() })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_u32::<LittleEndian>(VERSION).map_err(io_err)?;
    w.write_u64::<LittleEndian>(header_json.len() as u64).map_err(io_err)?;
    w.write_all(&header_json).map_err(io_err)?;
    for (_, _, tensor) in model.store.iter() {
        for &v in tensor.iter() {
            w.write_f64::<LittleEndian>(v).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Rebuild the model recorded at `path`: constructs a fresh [`SpotModel`]
/// from the stored config and overwrites every tensor.
pub fn load_checkpoint(path: &Path) -> Result<(SpotModel, SpotConfig), CheckpointError> {
    let io_err = |source| CheckpointError::Io { path: path.display().to_string(), source };
    let bad = |reason: String| CheckpointError::Malformed {
        path: path.display().to_string(),
        reason,
    };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io_err)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let header_len = r.read_u64::<LittleEndian>().map_err(io_err)? as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json).map_err(io_err)?;
    let header: Header =
        serde_json::from_slice(&header_json).map_err(|e| bad(format!("header: {e}")))?;

    let mut model = SpotModel::new(&header.config);
    if model.store.len() != header.tensors.len() {
        return Err(CheckpointError::Mismatch(format!(
            "model has {} tensors, checkpoint {}",
            model.store.len(),
            header.tensors.len()
        )));
    }
    for entry in &header.tensors {
        let id = model
            .store
            .id_of(&entry.name)
            .ok_or_else(|| CheckpointError::Mismatch(format!("unknown tensor {}", entry.name)))?;
        let expected = model.store.get(id).shape().to_vec();
        if expected != entry.shape {
            return Err(CheckpointError::Mismatch(format!(
                "tensor {} has shape {:?}, checkpoint {:?}",
                entry.name, expected, entry.shape
            )));
        }
        let n: usize = entry.shape.iter().product();
        let mut data = vec![0f64; n];
        for v in data.iter_mut() {
            *v = r.read_f64::<LittleEndian>().map_err(io_err)?;
        }
        *model.store.get_mut(id) =
            ndarray::ArrayD::from_shape_vec(entry.shape.clone(), data).expect("shape checked");
    }
    Ok((model, header.config))
}
