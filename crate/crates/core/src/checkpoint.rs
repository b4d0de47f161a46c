//! Versioned checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "LSTMCKPT"
//! 8       4     format version (u32, currently 1)
//! 12      4     header length N (u32)
//! 16      N     UTF-8 JSON header
//! 16+N    8·P   parameters as f64, P = header.param_count
//! ```
//!
//! The header records the architecture, the gate order tag, the precision,
//! the tensor layout and the corpus metadata. Tensors follow the order of
//! [`ModelParams::tensors`]: per layer `w_x, w_h, b`, then the output head
//! `w_y, b_y`, each row-major. The head reads the top layer's hidden state
//! only. Writing a loaded file reproduces it byte for byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lstm::{CheckpointMeta, ModelArchitecture, ModelCheckpoint, ModelParams, GATE_ORDER};

pub const MAGIC: &[u8; 8] = b"LSTMCKPT";
pub const FORMAT_VERSION: u32 = 1;
pub const PRECISION: &str = "f64";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorLayout {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    architecture: ModelArchitecture,
    gate_order: String,
    precision: String,
    param_count: usize,
    tensors: Vec<TensorLayout>,
    meta: CheckpointMeta,
}

pub fn to_bytes(ck: &ModelCheckpoint) -> Result<Vec<u8>> {
    let tensors = ck
        .params
        .tensor_names()
        .into_iter()
        .zip(ck.params.tensors())
        .map(|(name, t)| TensorLayout { name, len: t.len() })
        .collect();
    let header = Header {
        format_version: FORMAT_VERSION,
        architecture: ck.architecture.clone(),
        gate_order: GATE_ORDER.into(),
        precision: PRECISION.into(),
        param_count: ck.params.param_count(),
        tensors,
        meta: ck.meta.clone(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header.len() + 8 * ck.params.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for t in ck.params.tensors() {
        for x in t {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint(format!("truncated while reading {what}")));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

pub fn from_bytes(mut bytes: &[u8]) -> Result<ModelCheckpoint> {
    let bytes = &mut bytes;
    if take(bytes, 8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(bytes, 4, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let header_len = u32::from_le_bytes(take(bytes, 4, "header length")?.try_into().unwrap());
    let header: Header = serde_json::from_slice(take(bytes, header_len as usize, "header")?)
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    if header.format_version != version {
        return Err(Error::Checkpoint("header version disagrees with preamble".into()));
    }
    if header.gate_order != GATE_ORDER {
        return Err(Error::Checkpoint(format!(
            "gate order {:?} not supported",
            header.gate_order
        )));
    }
    if header.precision != PRECISION {
        return Err(Error::Checkpoint(format!(
            "precision {:?} not supported",
            header.precision
        )));
    }
    header
        .architecture
        .validate()
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut params = ModelParams::zeros(&header.architecture);
    if header.param_count != params.param_count() {
        return Err(Error::Checkpoint(format!(
            "param count {} does not match architecture ({})",
            header.param_count,
            params.param_count()
        )));
    }
    let expected: Vec<_> = params.tensors().iter().map(|t| t.len()).collect();
    let listed: Vec<_> = header.tensors.iter().map(|t| t.len).collect();
    if expected != listed {
        return Err(Error::Checkpoint("tensor layout does not match architecture".into()));
    }
    let blob = take(bytes, 8 * header.param_count, "parameters")?;
    if !bytes.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len())));
    }
    let mut values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for t in params.tensors_mut() {
        for x in t.iter_mut() {
            *x = values.next().expect("length checked");
        }
    }
    ModelCheckpoint::new(header.architecture, params, header.meta)
        .map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save(ck: &ModelCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(ck)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelCheckpoint> {
    from_bytes(&fs::read(path)?)
}
