//! Checkpoint files.
//!
//! ```text
//! b"SSEG1" | header length (u32 LE) | JSON header | f32 LE payload
//! ```
//!
//! The header is `{"arch": {..}, "tensors": [{"name", "shape", "offset"}]}`;
//! offsets count floats from the start of the payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ArchConfig, ModelParams, TensorEntry};

pub const MAGIC: &[u8; 5] = b"SSEG1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("truncated payload: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("header does not match the architecture: {0}")]
    ShapeMismatch(String),
    #[error("malformed header: {0}")]
    Header(String),
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(params: &ModelParams<f32>) -> Vec<u8> {
    let header = Header {
        arch: *params.arch(),
        tensors: params.index().to_vec(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + 4 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelParams<f32>, ArchConfig), CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.len() < 4 {
        return Err(CheckpointError::Header("missing header length".into()));
    }
    let hlen = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
    let rest = &rest[4..];
    if rest.len() < hlen {
        return Err(CheckpointError::Header(format!(
            "header claims {hlen} bytes, file has {}",
            rest.len()
        )));
    }
    let header: Header = serde_json::from_slice(&rest[..hlen])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let arch = header.arch;
    let template =
        ModelParams::<f32>::zeros(arch).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.tensors != template.index() {
        let detail = header
            .tensors
            .iter()
            .zip(template.index())
            .find(|(a, b)| a != b)
            .map(|(a, b)| {
                format!(
                    "{} {:?}@{} vs expected {} {:?}@{}",
                    a.name, a.shape, a.offset, b.name, b.shape, b.offset
                )
            })
            .unwrap_or_else(|| {
                format!(
                    "{} tensors vs expected {}",
                    header.tensors.len(),
                    template.index().len()
                )
            });
        return Err(CheckpointError::ShapeMismatch(detail));
    }
    let payload = &rest[hlen..];
    let expected = 4 * template.len();
    if payload.len() != expected {
        return Err(CheckpointError::Truncated {
            expected,
            got: payload.len(),
        });
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let params = ModelParams::from_parts(arch, values)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    Ok((params, arch))
}

pub fn save_checkpoint(params: &ModelParams<f32>, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(params)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams<f32>, ArchConfig), CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn arch() -> ArchConfig {
        ArchConfig {
            base_width: 2,
            depth: 1,
            tile: 8,
            embed_dim: 4,
            ..Default::default()
        }
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let mut p = init_params::<f32>(&arch(), 3).unwrap();
        p.values_mut()[0] = -0.0;
        p.values_mut()[1] = f32::MIN_POSITIVE / 2.0;
        let (q, a) = decode_checkpoint(&encode_checkpoint(&p)).unwrap();
        assert_eq!(a, arch());
        let bits =
            |m: &ModelParams<f32>| m.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p), bits(&q));
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = encode_checkpoint(&init_params(&arch(), 1).unwrap());
        bytes[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(CheckpointError::BadMagic)
        ));
        assert!(matches!(
            decode_checkpoint(b"SSE"),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn rejects_short_payload() {
        let mut bytes = encode_checkpoint(&init_params(&arch(), 1).unwrap());
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(CheckpointError::Truncated { .. })
        ));
    }

    #[test]
    fn rejects_header_shape_mismatch() {
        let p = init_params::<f32>(&arch(), 1).unwrap();
        let mut header = Header {
            arch: arch(),
            tensors: p.index().to_vec(),
        };
        header.tensors[0].shape[0] += 1;
        let json = serde_json::to_vec(&header).unwrap();
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&json);
        bytes.extend(std::iter::repeat_n(0u8, 4 * p.len()));
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(CheckpointError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn rejects_garbled_header() {
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(b"{x}");
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(CheckpointError::Header(_))
        ));
    }
}
