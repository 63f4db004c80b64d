//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"MATANETC"                 magic
//! u32                         format version
//! u64                         header length in bytes
//! [u8; header length]         JSON header (see `Header`)
//! parameter blobs             one per header.params entry, row-major, in order
//! moment blobs (optional)     first moments then second moments, same order
//! ```
//!
//! Values are stored in the scalar type named by `header.scalar`, so a
//! save/load round trip is bit-exact.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::network::{Matanet, ModelConfig};
use super::ModelError;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"MATANETC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("checkpoint holds {found} values, expected {expected}")]
    Scalar { found: String, expected: &'static str },
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint layout mismatch: {0}")]
    Layout(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    scalar: String,
    model: ModelConfig,
    params: Vec<ParamMeta>,
    frozen_encoders: bool,
    /// Optimizer step count when moment blobs follow the parameters.
    optimizer_step: Option<u64>,
    /// Caller-owned metadata (label spaces, taxonomy, training state, ...).
    meta: serde_json::Value,
}

/// Adaptive-moment optimizer state laid out like the parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub step: u64,
    pub m: Vec<Array2<T>>,
    pub v: Vec<Array2<T>>,
}

pub struct Checkpoint<T> {
    pub model: Matanet<T>,
    pub moments: Option<Moments<T>>,
    pub meta: serde_json::Value,
}

pub fn save<T: Scalar>(path: &Path, model: &Matanet<T>, moments: Option<&Moments<T>>, meta: &serde_json::Value) -> Result<(), CheckpointError> {
    let ps = model.params();
    let header = Header {
        format_version: FORMAT_VERSION,
        scalar: T::TAG.to_string(),
        model: model.config().clone(),
        params: ps.entries().iter().map(|e| ParamMeta { name: e.name.clone(), shape: [e.value.nrows(), e.value.ncols()] }).collect(),
        frozen_encoders: model.config().encoder.freeze,
        optimizer_step: moments.map(|m| m.step),
        meta: meta.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(header_bytes.len() + 2 * ps.numel() * T::BYTES + 32);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    let write_all = |buf: &mut Vec<u8>, arrays: &mut dyn Iterator<Item = &Array2<T>>| {
        for a in arrays {
            for &v in a.iter() {
                v.write_le(buf);
            }
        }
    };
    write_all(&mut buf, &mut ps.entries().iter().map(|e| &e.value));
    if let Some(m) = moments {
        if m.m.len() != ps.len() || m.v.len() != ps.len() {
            return Err(CheckpointError::Layout("moment buffers do not match the parameter store".into()));
        }
        write_all(&mut buf, &mut m.m.iter());
        write_all(&mut buf, &mut m.v.iter());
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>, CheckpointError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| CheckpointError::Layout("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body)?;
    if header.scalar != T::TAG {
        return Err(CheckpointError::Scalar { found: header.scalar, expected: T::TAG });
    }
    let mut model = Matanet::<T>::new(header.model.clone())?;
    if model.params().len() != header.params.len() {
        return Err(CheckpointError::Layout(format!("{} tensors stored, model has {}", header.params.len(), model.params().len())));
    }
    let mut cursor = 20 + hlen;
    let mut take = |shape: (usize, usize)| -> Result<Array2<T>, CheckpointError> {
        let n = shape.0 * shape.1 * T::BYTES;
        let chunk = bytes.get(cursor..cursor + n).ok_or_else(|| CheckpointError::Layout("truncated blob".into()))?;
        cursor += n;
        let vals: Vec<T> = chunk.chunks_exact(T::BYTES).map(T::read_le).collect();
        Ok(Array2::from_shape_vec(shape, vals).expect("sized"))
    };
    for (entry, meta) in model.params_mut().entries_mut().iter_mut().zip(&header.params) {
        if entry.name != meta.name || entry.value.dim() != (meta.shape[0], meta.shape[1]) {
            return Err(CheckpointError::Layout(format!(
                "tensor {} {:?} does not match stored {} {:?}",
                entry.name,
                entry.value.dim(),
                meta.name,
                meta.shape
            )));
        }
        entry.value = take(entry.value.dim())?;
    }
    let shapes: Vec<(usize, usize)> = header.params.iter().map(|p| (p.shape[0], p.shape[1])).collect();
    let moments = match header.optimizer_step {
        Some(step) => {
            let m = shapes.iter().map(|&s| take(s)).collect::<Result<Vec<_>, _>>()?;
            let v = shapes.iter().map(|&s| take(s)).collect::<Result<Vec<_>, _>>()?;
            Some(Moments { step, m, v })
        }
        None => None,
    };
    if cursor != bytes.len() {
        return Err(CheckpointError::Layout(format!("{} trailing bytes", bytes.len() - cursor)));
    }
    model.set_encoders_frozen(header.frozen_encoders);
    Ok(Checkpoint { model, moments, meta: header.meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderConfig;
    use crate::roi_context::ContextScale;

    fn cfg() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig { image_side: 8, patch_size: 4, dim: 8, depth: 1, heads: 2, ..EncoderConfig::default() },
            scales: vec![ContextScale::X3, ContextScale::Full],
            fusion_blocks: 1,
            fusion_heads: 2,
            fused_dim: 8,
            num_classes: 3,
            level_sizes: vec![2],
            init_seed: 9,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut model = Matanet::<f32>::new(cfg()).unwrap();
        for e in model.params_mut().entries_mut() {
            e.value.mapv_inplace(|v| v * 1.000_1 + 1e-7);
        }
        let moments = Moments {
            step: 17,
            m: model.params().entries().iter().map(|e| e.value.mapv(|v| v * 0.5)).collect(),
            v: model.params().entries().iter().map(|e| e.value.mapv(|v| v * v)).collect(),
        };
        let meta = serde_json::json!({"epoch": 3});
        save(&path, &model, Some(&moments), &meta).unwrap();
        let back = load::<f32>(&path).unwrap();
        assert_eq!(back.model.params(), model.params());
        assert_eq!(back.moments.unwrap(), moments);
        assert_eq!(back.meta, meta);
        assert!(matches!(load::<f64>(&path), Err(CheckpointError::Scalar { .. })));
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(load::<f32>(&path), Err(CheckpointError::BadMagic)));
    }
}
