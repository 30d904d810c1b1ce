//! Self-describing weight container.
//!
//! Layout: the magic bytes `SIAMABC\0`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header (model
//! configuration, configuration echo, tensor directory) and finally the
//! tensor data as little-endian `f64` in directory order.

use std::fs;
use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SiamAbc};
use crate::training::PROJECTION_PREFIX;

pub const MAGIC: &[u8; 8] = b"SIAMABC\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Param,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub model: ModelConfig,
    /// Effective configuration of the run that produced the weights.
    pub config_echo: String,
    pub tensors: Vec<TensorEntry>,
}

/// Serializes the tracking weights; training-only tensors are left out.
pub fn to_bytes(model: &SiamAbc, config_echo: &str) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut data: Vec<&Tensor> = Vec::new();
    for (kind, store) in [
        (TensorKind::Param, &model.weights.params),
        (TensorKind::Buffer, &model.weights.buffers),
    ] {
        for (name, t) in store.iter().filter(|(k, _)| !k.starts_with(PROJECTION_PREFIX)) {
            entries.push(TensorEntry {
                name: name.clone(),
                kind,
                shape: t.shape().to_vec(),
            });
            data.push(t);
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        model: model.config.clone(),
        config_echo: config_echo.to_string(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * data.iter().map(|t| t.len()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in data {
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Data("checkpoint is truncated".into()));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

/// Parses a container and checks it against the architecture its header
/// describes: every tensor must be present with the expected shape.
pub fn from_bytes(mut bytes: &[u8]) -> Result<(SiamAbc, Header)> {
    if take(&mut bytes, 8)? != MAGIC {
        return Err(Error::Data("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(take(&mut bytes, 8)?.try_into().expect("8 bytes")) as usize;
    let header: Header =
        serde_json::from_slice(take(&mut bytes, len)?).map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;

    let mut model = SiamAbc::new(header.model.clone(), 0)?;
    let expected = model.weights.params.len() + model.weights.buffers.len();
    if header.tensors.len() != expected {
        return Err(Error::Data(format!(
            "checkpoint has {} tensors, architecture needs {expected}",
            header.tensors.len()
        )));
    }
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let raw = take(&mut bytes, 8 * n)?;
        let vals: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let store = match e.kind {
            TensorKind::Param => &mut model.weights.params,
            TensorKind::Buffer => &mut model.weights.buffers,
        };
        let slot = store.get_mut(&e.name).map_err(|_| {
            Error::Data(format!(
                "checkpoint tensor `{}` is not part of the architecture",
                e.name
            ))
        })?;
        if slot.shape() != e.shape.as_slice() {
            return Err(Error::Data(format!(
                "checkpoint tensor `{}` has shape {:?}, expected {:?}",
                e.name,
                e.shape,
                slot.shape()
            )));
        }
        *slot = Tensor::from_shape_vec(IxDyn(&e.shape), vals).map_err(|e| Error::Data(e.to_string()))?;
    }
    if !bytes.is_empty() {
        return Err(Error::Data("trailing bytes after checkpoint data".into()));
    }
    Ok((model, header))
}

pub fn save_checkpoint(path: &Path, model: &SiamAbc, config_echo: &str) -> Result<()> {
    fs::write(path, to_bytes(model, config_echo)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(SiamAbc, Header)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
