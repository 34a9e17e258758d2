//! Checkpoint file format: a single binary file carrying a format version,
//! a JSON header (model config plus optional training metadata) and named
//! tensors with explicit shapes.
//!
//! Tensor data is stored as little-endian f64 regardless of the in-memory
//! scalar type; f32 values survive the f32 -> f64 -> f32 round trip exactly,
//! so save/load/resume is bit-identical for both precisions.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::model::{expected_shapes, ModelConfig, ModelParams};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"PFNLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("tensor {tensor} has shape {found}, expected {expected}")]
    ShapeMismatch { tensor: String, expected: String, found: String },
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("header error: {0}")]
    Header(#[from] serde_json::Error),
}

/// One stored tensor: name, shape, row-major f64 data.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Everything in a checkpoint file.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Free-form training metadata (absent for pure parameter checkpoints).
    pub meta: Option<serde_json::Value>,
    pub tensors: Vec<NamedTensor>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    config: ModelConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    let header = serde_json::to_vec(&Header { config: ckpt.config.clone(), meta: ckpt.meta.clone() })?;
    w.write_u32::<LittleEndian>(header.len() as u32)?;
    w.write_all(&header)?;
    w.write_u32::<LittleEndian>(ckpt.tensors.len() as u32)?;
    for t in &ckpt.tensors {
        let name = t.name.as_bytes();
        w.write_u16::<LittleEndian>(name.len() as u16)?;
        w.write_all(name)?;
        w.write_u8(t.shape.len() as u8)?;
        for &d in &t.shape {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        let expect: usize = t.shape.iter().product();
        debug_assert_eq!(expect, t.data.len());
        for &v in &t.data {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let header_len = r.read_u32::<LittleEndian>()? as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;

    let n_tensors = r.read_u32::<LittleEndian>()? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = r.read_u16::<LittleEndian>()? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Corrupt("tensor name is not utf-8".into()))?;
        let ndim = r.read_u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = vec![0f64; len];
        r.read_f64_into::<LittleEndian>(&mut data)?;
        tensors.push(NamedTensor { name, shape, data });
    }
    Ok(Checkpoint { config: header.config, meta: header.meta, tensors })
}

/// Collect a parameter set as named tensors (canonical order).
pub fn params_to_tensors<F: Scalar>(params: &ModelParams<F>) -> Vec<NamedTensor> {
    params
        .tensors()
        .into_iter()
        .map(|(name, t)| NamedTensor {
            shape: t.shape(),
            data: t.as_slice().iter().map(|v| v.into_f64()).collect(),
            name,
        })
        .collect()
}

/// Rebuild parameters from named tensors, validating every shape against the
/// config and naming the first mismatch.
pub fn params_from_tensors<F: Scalar>(
    cfg: &ModelConfig,
    tensors: &[NamedTensor],
) -> Result<ModelParams<F>, CheckpointError> {
    let mut params = ModelParams::<F>::init(cfg, 0)
        .map_err(|e| CheckpointError::Corrupt(format!("config rejected: {e}")))?;
    for (ename, eshape) in expected_shapes(cfg) {
        let stored = tensors
            .iter()
            .find(|t| t.name == ename)
            .ok_or_else(|| CheckpointError::MissingTensor(ename.clone()))?;
        if stored.shape != eshape {
            return Err(CheckpointError::ShapeMismatch {
                tensor: ename,
                expected: format!("{eshape:?}"),
                found: format!("{:?}", stored.shape),
            });
        }
    }
    // Shapes verified; now copy in canonical order.
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    for (i, mut t) in params.tensors_mut().into_iter().enumerate() {
        let stored = tensors.iter().find(|s| s.name == names[i]).expect("verified above");
        for (dst, &src) in t.as_slice_mut().iter_mut().zip(stored.data.iter()) {
            *dst = F::cast(src);
        }
    }
    Ok(params)
}

/// Save a pure parameter checkpoint.
pub fn save_params<F: Scalar>(
    path: &Path,
    cfg: &ModelConfig,
    params: &ModelParams<F>,
) -> Result<(), CheckpointError> {
    write_checkpoint(path, &Checkpoint { config: cfg.clone(), meta: None, tensors: params_to_tensors(params) })
}

/// Load a parameter checkpoint, validating shapes against its own config.
pub fn load_params<F: Scalar>(path: &Path) -> Result<(ModelConfig, ModelParams<F>), CheckpointError> {
    let ckpt = read_checkpoint(path)?;
    let params = params_from_tensors(&ckpt.config, &ckpt.tensors)?;
    Ok((ckpt.config, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::TaskKind;

    fn cfg() -> ModelConfig {
        ModelConfig {
            hidden_dim: 8,
            n_layers: 2,
            n_heads: 2,
            feedforward_dim: 16,
            max_features: 5,
            max_classes: 3,
            task: TaskKind::Classification,
            query_self_attend: true,
        }
    }

    #[test]
    fn params_round_trip_bit_identically_f64() {
        let c = cfg();
        let p = ModelParams::<f64>::init(&c, 7).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_params(f.path(), &c, &p).unwrap();
        let (c2, p2) = load_params::<f64>(f.path()).unwrap();
        assert_eq!(c, c2);
        assert_eq!(p, p2);
    }

    #[test]
    fn params_round_trip_bit_identically_f32() {
        let c = cfg();
        let p = ModelParams::<f32>::init(&c, 7).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_params(f.path(), &c, &p).unwrap();
        let (_, p2) = load_params::<f32>(f.path()).unwrap();
        assert_eq!(p, p2);
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let c = cfg();
        let p = ModelParams::<f64>::init(&c, 7).unwrap();
        let mut tensors = params_to_tensors(&p);
        tensors[0].shape = vec![4, 8];
        tensors[0].data.truncate(32);
        let err = params_from_tensors::<f64>(&c, &tensors).unwrap_err();
        match err {
            CheckpointError::ShapeMismatch { tensor, .. } => assert_eq!(tensor, "embed.w_x"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn missing_tensor_is_reported_by_name() {
        let c = cfg();
        let p = ModelParams::<f64>::init(&c, 7).unwrap();
        let mut tensors = params_to_tensors(&p);
        tensors.retain(|t| t.name != "head.w");
        let err = params_from_tensors::<f64>(&c, &tensors).unwrap_err();
        assert!(matches!(err, CheckpointError::MissingTensor(n) if n == "head.w"));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), b"NOTACKPTxxxxxxxxxxx").unwrap();
        assert!(matches!(read_checkpoint(f.path()), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn version_is_checked() {
        let c = cfg();
        let p = ModelParams::<f64>::init(&c, 7).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_params(f.path(), &c, &p).unwrap();
        let mut bytes = std::fs::read(f.path()).unwrap();
        bytes[8] = 99; // version field
        std::fs::write(f.path(), &bytes).unwrap();
        assert!(matches!(read_checkpoint(f.path()), Err(CheckpointError::BadVersion(99))));
    }
}
