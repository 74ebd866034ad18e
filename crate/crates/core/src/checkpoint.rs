//! Binary tensor archives.
//!
//! Layout: magic `ZTRX`, version `u16` LE, header length `u32` LE, a JSON
//! header, then the raw little-endian `f64` payload. Tensor offsets in the
//! header are byte offsets into the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::io::{read_bytes, write_atomic};
use crate::model::{ModelParams, TransformerConfig};

pub const MAGIC: &[u8; 4] = b"ZTRX";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus free-form JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn encode_archive(archive: &Archive) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(archive.tensors.len());
    let mut offset = 0;
    for (name, t) in &archive.tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len() * 8;
    }
    let header = serde_json::to_vec(&Header {
        meta: archive.meta.clone(),
        tensors: entries,
    })?;
    let header_len = u32::try_from(header.len())
        .map_err(|_| Error::Format("header larger than 4 GiB".into()))?;
    let mut out = Vec::with_capacity(10 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in &archive.tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_archive(bytes: &[u8]) -> Result<Archive> {
    if bytes.len() < 10 {
        return Err(Error::Format(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let payload_start = 10 + header_len;
    if bytes.len() < payload_start {
        return Err(Error::Format("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[10..payload_start])
        .map_err(|e| Error::Format(format!("header: {e}")))?;
    let payload = &bytes[payload_start..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut expected_end = 0;
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * 8;
        if end > payload.len() {
            return Err(Error::Format(format!(
                "tensor {} extends past end of payload (truncated file?)",
                e.name
            )));
        }
        let data = payload[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        expected_end = expected_end.max(end);
        tensors.push((e.name, Tensor::new(e.shape, data)?));
    }
    if payload.len() != expected_end {
        return Err(Error::Format(format!(
            "payload has {} bytes, header describes {expected_end}",
            payload.len()
        )));
    }
    Ok(Archive {
        meta: header.meta,
        tensors,
    })
}

pub fn write_archive(path: &Path, archive: &Archive) -> Result<()> {
    write_atomic(path, &encode_archive(archive)?)
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    decode_archive(&read_bytes(path)?)
}

pub fn params_to_archive(params: &ModelParams) -> Result<Archive> {
    Ok(Archive {
        meta: serde_json::json!({ "config": serde_json::to_value(params.config())? }),
        tensors: params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect(),
    })
}

pub fn params_from_archive(archive: Archive) -> Result<ModelParams> {
    let config: TransformerConfig = serde_json::from_value(
        archive
            .meta
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Format("checkpoint header has no model config".into()))?,
    )
    .map_err(|e| Error::Format(format!("model config: {e}")))?;
    ModelParams::from_tensors(config, archive.tensors)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    write_archive(path, &params_to_archive(params)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    params_from_archive(read_archive(path)?)
}

/// Loads a checkpoint and checks it against an expected architecture.
pub fn load_checkpoint_for(path: &Path, expected: &TransformerConfig) -> Result<ModelParams> {
    let params = load_checkpoint(path)?;
    let stored = params.config();
    if !stored.same_architecture(expected) {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint architecture {} differs from requested {}",
            stored.describe(),
            expected.describe()
        )));
    }
    Ok(params)
}
