//! Checkpoint files: one line of JSON metadata, then the little-endian raw
//! payload of every tensor back to back.
//!
//! ```text
//! {"format":"tooltip-checkpoint/1","dtype":"f32","meta":{...},"tensors":[{"name":..,"shape":[..],"offset":0,"bytes":..},..]}\n
//! <payload>
//! ```
//! `offset` is relative to the first payload byte.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};

pub const FORMAT: &str = "tooltip-checkpoint/1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint metadata mismatch: {0}")]
    MetadataMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub dtype: String,
    /// Free-form metadata, typically the model configuration.
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode<T: Scalar>(meta: serde_json::Value, tensors: &[(String, &Tensor<T>)]) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let offset = payload.len();
        t.data().iter().for_each(|v| v.write_le(&mut payload));
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            bytes: payload.len() - offset,
        });
    }
    let header = Header {
        format: FORMAT.to_string(),
        dtype: T::DTYPE.to_string(),
        meta,
        tensors: entries,
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.extend_from_slice(&payload);
    out
}

/// Parses a checkpoint; tensors are converted to `T` when the stored dtype
/// differs.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(Header, Vec<(String, Tensor<T>)>), CheckpointError> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CheckpointError::Format("missing header line".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| CheckpointError::Format(format!("header: {e}")))?;
    if header.format != FORMAT {
        return Err(CheckpointError::Format(format!("unknown format {:?}", header.format)));
    }
    let payload = &bytes[nl + 1..];
    let mut out = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let numel: usize = e.shape.iter().product();
        let data: Vec<T> = match header.dtype.as_str() {
            "f32" => read_slice::<f32>(payload, e, numel)?
                .into_iter()
                .map(|v| T::c(v as f64))
                .collect(),
            "f64" => read_slice::<f64>(payload, e, numel)?
                .into_iter()
                .map(T::c)
                .collect(),
            other => return Err(CheckpointError::Format(format!("unsupported dtype {other:?}"))),
        };
        let t = Tensor::from_vec(&e.shape, data).map_err(|err| CheckpointError::Format(err.to_string()))?;
        out.push((e.name.clone(), t));
    }
    Ok((header, out))
}

fn read_slice<S: Scalar>(payload: &[u8], e: &TensorEntry, numel: usize) -> Result<Vec<S>, CheckpointError> {
    if e.bytes != numel * S::BYTES {
        return Err(CheckpointError::Format(format!(
            "tensor {} declares {} bytes for {numel} values",
            e.name, e.bytes
        )));
    }
    let chunk = payload
        .get(e.offset..e.offset + e.bytes)
        .ok_or_else(|| CheckpointError::Format(format!("tensor {} runs past the payload", e.name)))?;
    Ok(chunk.chunks_exact(S::BYTES).map(S::read_le).collect())
}

pub fn save<T: Scalar>(
    path: impl AsRef<Path>,
    meta: serde_json::Value,
    tensors: &[(String, &Tensor<T>)],
) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    fs::write(path, encode(meta, tensors)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<(Header, Vec<(String, Tensor<T>)>), CheckpointError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0f32, -0.1, f32::MIN_POSITIVE, 3.4e38]).unwrap();
        let b = Tensor::from_vec(&[3], vec![0.5f32, 0.25, -7.0]).unwrap();
        let bytes = encode(serde_json::json!({"k": 1}), &[("a".into(), &a), ("b".into(), &b)]);
        let (header, ts) = decode::<f32>(&bytes).unwrap();
        assert_eq!(header.dtype, "f32");
        assert_eq!(header.tensors[1].offset, 16);
        assert_eq!(ts[0].1, a);
        assert_eq!(ts[1].1, b);
        assert_eq!(ts[0].1.data()[1].to_bits(), (-0.1f32).to_bits());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let a = Tensor::from_vec(&[4], vec![1.0f64; 4]).unwrap();
        let mut bytes = encode(serde_json::Value::Null, &[("a".into(), &a)]);
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode::<f64>(&bytes), Err(CheckpointError::Format(_))));
        assert!(matches!(decode::<f64>(b"no newline"), Err(CheckpointError::Format(_))));
    }
}
