//! Model persistence: a magic tag, a JSON header, and a checksummed blob
//! of parameter values.
//!
//! Layout: 8 magic bytes, a little-endian u64 header length, the header
//! JSON (config, tensor names and shapes, blob length, SHA-256 of the
//! blob), then every parameter as little-endian f64 in header order.
//! Loading verifies magic, checksum, and that the stored shapes match the
//! config's parameter layout exactly.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{param_layout, ModelError, Result, ScorerConfig, ScoringModel};
use crate::numgrad::Tensor;

/// First eight bytes of every checkpoint file.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SOPRT001";

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ScorerConfig,
    tensors: Vec<TensorMeta>,
    blob_len: u64,
    sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn corrupt(path: &Path, what: impl Into<String>) -> ModelError {
    ModelError::Corrupt {
        path: path.display().to_string(),
        what: what.into(),
    }
}

/// Writes `model` to `path`, replacing any existing file.
pub fn save_checkpoint(path: &Path, model: &ScoringModel) -> Result<()> {
    let layout = param_layout(model.config());
    let params = model.param_refs();
    let mut blob = Vec::new();
    for p in &params {
        for v in p.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        config: model.config().clone(),
        tensors: layout
            .into_iter()
            .map(|(name, shape, _)| TensorMeta { name, shape })
            .collect(),
        blob_len: blob.len() as u64,
        sha256: hex(&Sha256::digest(&blob)),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| corrupt(path, format!("header serialization failed: {e}")))?;

    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC).map_err(io_err(path))?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())
        .map_err(io_err(path))?;
    w.write_all(&header_bytes).map_err(io_err(path))?;
    w.write_all(&blob).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Reads a checkpoint back into a model, verifying magic, checksum, and
/// shape agreement between the stored config and the stored tensors.
pub fn load_checkpoint(path: &Path) -> Result<ScoringModel> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;

    if bytes.len() < 16 {
        return Err(corrupt(path, "file shorter than the fixed prefix"));
    }
    if bytes[..8] != CHECKPOINT_MAGIC[..] {
        if bytes[..5] == b"SOPRT"[..] {
            return Err(corrupt(
                path,
                format!(
                    "unsupported checkpoint version {:?}; this build reads {:?}",
                    String::from_utf8_lossy(&bytes[..8]),
                    String::from_utf8_lossy(CHECKPOINT_MAGIC)
                ),
            ));
        }
        return Err(ModelError::BadMagic {
            path: path.display().to_string(),
        });
    }

    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let blob_start = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| corrupt(path, "header length exceeds file size"))?;
    let header: Header = serde_json::from_slice(&bytes[16..blob_start])
        .map_err(|e| corrupt(path, format!("invalid header JSON: {e}")))?;

    let blob = &bytes[blob_start..];
    if blob.len() as u64 != header.blob_len {
        return Err(corrupt(
            path,
            format!(
                "blob has {} bytes, header says {}",
                blob.len(),
                header.blob_len
            ),
        ));
    }
    if hex(&Sha256::digest(blob)) != header.sha256 {
        return Err(corrupt(path, "blob checksum mismatch"));
    }

    header.config.validate()?;
    let layout = param_layout(&header.config);
    if layout.len() != header.tensors.len() {
        return Err(corrupt(
            path,
            format!(
                "config implies {} tensors, header lists {}",
                layout.len(),
                header.tensors.len()
            ),
        ));
    }
    for ((name, shape, _), meta) in layout.iter().zip(&header.tensors) {
        if *name != meta.name || *shape != meta.shape {
            return Err(ModelError::TensorShape {
                name: meta.name.clone(),
                want: shape.clone(),
                got: meta.shape.clone(),
            });
        }
    }
    let total: usize = layout
        .iter()
        .map(|(_, shape, _)| shape.iter().product::<usize>())
        .sum();
    if total * 8 != blob.len() {
        return Err(corrupt(
            path,
            format!("blob holds {} bytes, shapes need {}", blob.len(), total * 8),
        ));
    }

    let mut offset = 0;
    let mut params = Vec::with_capacity(layout.len());
    for (name, shape, _) in &layout {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = blob[offset..offset + numel * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += numel * 8;
        let t = Tensor::new(shape.clone(), data)
            .map_err(|e| corrupt(path, format!("tensor {name}: {e}")))?;
        params.push(t);
    }
    ScoringModel::from_params(header.config, params)
}
