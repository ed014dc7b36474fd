//! Binary checkpoint format.
//!
//! ```text
//! "IFAM" | version: u32 LE | header_len: u64 LE | header JSON | blobs | sha256(all preceding bytes)
//! ```
//!
//! The header holds the model config and a directory of `{name, shape, dtype, offset}`
//! entries; offsets are relative to the start of the blob region and every blob is a
//! little-endian array of `f64` or `f32`.

use std::path::Path;

use ifam_core::model::{IfamConfig, IfamModel};
use ifam_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"IFAM";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    /// Bit-exact storage of the in-memory parameters.
    #[default]
    F64,
    /// Half the size; values are rounded to the nearest `f32`.
    F32,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub config: IfamConfig,
    pub params: Vec<Entry>,
}

pub fn to_bytes(model: &IfamModel, dtype: Dtype) -> Vec<u8> {
    let mut blobs = Vec::new();
    let mut params = Vec::new();
    for (name, t) in model.store.iter() {
        params.push(Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype,
            offset: blobs.len(),
        });
        for &v in t.data() {
            match dtype {
                Dtype::F64 => blobs.extend_from_slice(&v.to_le_bytes()),
                Dtype::F32 => blobs.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    let header = serde_json::to_vec(&Header {
        config: model.config().clone(),
        params,
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + blobs.len() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&blobs);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Parses and verifies a checkpoint; `path` is used only in error messages.
pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<IfamModel> {
    let bad = |detail: String| CliError::Checkpoint {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 16 + DIGEST_LEN || &bytes[..4] != MAGIC {
        return Err(bad("not an IFAM checkpoint".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CliError::Checksum(path.to_path_buf()));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| bad("header extends past end of file".into()))?;
    let header: Header = serde_json::from_slice(&body[16..header_end]).map_err(|e| bad(format!("header: {e}")))?;
    let blobs = &body[header_end..];
    let mut params = Vec::with_capacity(header.params.len());
    for e in header.params {
        let n: usize = e.shape.iter().product();
        let w = e.dtype.width();
        let end = n
            .checked_mul(w)
            .and_then(|len| e.offset.checked_add(len))
            .filter(|&end| end <= blobs.len())
            .ok_or_else(|| bad(format!("blob of '{}' out of range", e.name)))?;
        let raw = &blobs[e.offset..end];
        let data: Vec<f64> = match e.dtype {
            Dtype::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            Dtype::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        };
        let t = Tensor::new(&e.shape, data).map_err(|err| bad(err.to_string()))?;
        params.push((e.name, t));
    }
    IfamModel::from_params(header.config, params).map_err(|e| bad(e.to_string()))
}

pub fn save(model: &IfamModel, path: &Path, dtype: Dtype) -> Result<()> {
    std::fs::write(path, to_bytes(model, dtype)).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

pub fn load(path: &Path) -> Result<IfamModel> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    from_bytes(&bytes, path)
}
