//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "OCGN" | version u32 | meta_len u32 | meta JSON (sorted keys)
//! | tensor_count u32
//! | per tensor: name_len u32, name UTF-8, rank u32, dims u32…, f32 payload
//! ```
//!
//! Tensors are written in sorted name order, so `save(load(x)) == x` byte
//! for byte. Loading validates shapes against a fresh build of the stored
//! configuration.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use thiserror::Error;

use crate::model::{networks, ModelConfig};
use crate::nn::ParameterStore;
use crate::training::TrainConfig;

const MAGIC: &[u8; 4] = b"OCGN";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint does not match its configuration: {0}")]
    ConfigMismatch(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("metadata error: {0}")]
    Meta(#[from] serde_json::Error),
}

fn io_ctx(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CheckpointError {
    let context = context.into();
    move |source| CheckpointError::Io { context, source }
}

/// Run state stored alongside the tensors.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub iteration: usize,
    pub best_val_mse: Option<f64>,
}

pub fn save_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    store: &ParameterStore<f32>,
) -> Result<(), CheckpointError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let meta_json = crate::jsonio::to_sorted_string(meta)?;
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(meta_json.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, tensor) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.ndim() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(io_ctx(format!(
        "creating checkpoint {}",
        path.display()
    )))?;
    file.write_all(&out)
        .map_err(io_ctx("writing checkpoint"))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Format(format!(
                "truncated: wanted {} bytes at offset {}, file has {}",
                n,
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, ParameterStore<f32>), CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(io_ctx(format!("opening checkpoint {}", path.display())))?
        .read_to_end(&mut bytes)
        .map_err(io_ctx("reading checkpoint"))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };

    if r.take(4)? != MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Format(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;

    let tensor_count = r.u32()? as usize;
    let mut store = ParameterStore::new();
    for _ in 0..tensor_count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| CheckpointError::Format(format!("bad tensor name: {e}")))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let count: usize = dims.iter().product();
        let payload = r.take(count * 4)?;
        let mut data = Vec::with_capacity(count);
        for chunk in payload.chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        let tensor = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| CheckpointError::Format(format!("tensor {name}: {e}")))?;
        if store.contains(&name) {
            return Err(CheckpointError::Format(format!("duplicate tensor {name}")));
        }
        store.insert(name, tensor);
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }

    validate_against_config(&meta, &store)?;
    Ok((meta, store))
}

/// Rebuild the expected parameter set from the stored configuration and
/// compare names and shapes.
fn validate_against_config(
    meta: &CheckpointMeta,
    store: &ParameterStore<f32>,
) -> Result<(), CheckpointError> {
    let nets = networks(&meta.model)
        .map_err(|e| CheckpointError::ConfigMismatch(format!("stored config invalid: {e}")))?;
    let mut expected: ParameterStore<f32> = ParameterStore::new();
    nets.init_params(&mut expected, &meta.train.ablation.net_kinds());
    if expected.len() != store.len() {
        return Err(CheckpointError::ConfigMismatch(format!(
            "expected {} tensors for this configuration, found {}",
            expected.len(),
            store.len()
        )));
    }
    for (name, tensor) in expected.iter() {
        if !store.contains(name) {
            return Err(CheckpointError::ConfigMismatch(format!(
                "missing tensor {name}"
            )));
        }
        if store.get(name).shape() != tensor.shape() {
            return Err(CheckpointError::ConfigMismatch(format!(
                "tensor {name}: expected shape {:?}, found {:?}",
                tensor.shape(),
                store.get(name).shape()
            )));
        }
    }
    Ok(())
}
