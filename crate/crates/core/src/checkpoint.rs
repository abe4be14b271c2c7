//! Self-describing model archives.
//!
//! Layout: the 8-byte magic `SEGFLOW1`, a little-endian u32 header length, a
//! JSON header (config, config hash, tensor index, free-form metadata), then
//! every tensor as little-endian f64 in index order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SegFlowModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SEGFLOW1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    config_hash: String,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

/// A loaded archive: the rebuilt model plus its metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: SegFlowModel,
    pub metadata: BTreeMap<String, String>,
}

pub fn to_bytes(model: &SegFlowModel, metadata: &BTreeMap<String, String>) -> Vec<u8> {
    let header = Header {
        config: model.config().clone(),
        config_hash: model.config().hash(),
        tensors: model
            .params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        metadata: metadata.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + 8 * model.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint archive (bad magic)"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(12..12 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.config.hash() != header.config_hash {
        return Err(bad("config hash does not match the stored config"));
    }
    let mut model = SegFlowModel::new(header.config)?;
    if model.params.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "archive has {} tensors, config implies {}",
            header.tensors.len(),
            model.params.len()
        )));
    }
    let mut cursor = 12 + len;
    for (slot, entry) in header.tensors.iter().enumerate() {
        let param = model.params.get_mut(slot);
        if param.name != entry.name || param.value.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!("tensor {} does not match the model layout", entry.name)));
        }
        let n = param.value.len();
        let raw = bytes.get(cursor..cursor + 8 * n).ok_or_else(|| bad("truncated tensor data"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        param.value = Tensor::from_vec(&entry.shape, data);
        cursor += 8 * n;
    }
    if cursor != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok(Checkpoint {
        model,
        metadata: header.metadata,
    })
}

pub fn save(model: &SegFlowModel, metadata: &BTreeMap<String, String>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(model, metadata)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Load and require the stored config to equal `expected`.
pub fn load_matching(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Checkpoint> {
    let ck = load(path)?;
    if ck.model.config().hash() != expected.hash() {
        return Err(Error::Checkpoint("checkpoint config differs from the requested model config".into()));
    }
    Ok(ck)
}

/// Hex sha256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
