//! Model checkpoints.
//!
//! ```text
//! "RBCKPT\0\0" | u32 LE header length | UTF-8 JSON header | f32 LE parameters
//! ```
//!
//! The header's `checksum` is the SHA-256 of the canonical architecture JSON
//! followed by the payload, so edits to either are detected on load.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::arch::{ArchSpec, NetworkModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RBCKPT\0\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    arch: ArchSpec,
    param_count: usize,
    init_seed: u64,
    checksum: String,
}

fn checksum(arch: &ArchSpec, payload: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(arch).expect("arch serializes"));
    h.update(payload);
    hex::encode(h.finalize())
}

pub fn encode_checkpoint(model: &NetworkModel) -> Vec<u8> {
    let payload: Vec<u8> = model.params.iter().flat_map(|p| p.to_le_bytes()).collect();
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        arch: model.arch,
        param_count: model.params.len(),
        init_seed: model.init_seed,
        checksum: checksum(&model.arch, &payload),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<NetworkModel> {
    let bad = |r: String| Error::format(path, r);
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing checkpoint magic".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() < hlen {
        return Err(bad("truncated header".into()));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", header.format_version)));
    }
    let payload = &body[hlen..];
    if payload.len() != header.param_count * 4 {
        return Err(bad(format!(
            "payload holds {} bytes, header promises {} floats",
            payload.len(),
            header.param_count
        )));
    }
    if checksum(&header.arch, payload) != header.checksum {
        return Err(bad("checksum mismatch".into()));
    }
    let params = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    NetworkModel::from_params(header.arch, header.init_seed, params).map_err(|e| bad(e.to_string()))
}

pub fn save_checkpoint(path: &Path, model: &NetworkModel) -> Result<()> {
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
