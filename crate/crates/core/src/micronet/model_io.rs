//! GPM model files: magic, u32 header length, JSON header text, u64
//! parameter count, then parameters as little-endian f32 in layer order.
//! A file may hold several records back to back.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MicroNet, MicroNetConfig};
use crate::error::{Error, Result};

pub const GPM_MAGIC: &[u8; 4] = b"GPM1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHeader {
    pub config: MicroNetConfig,
    /// Free-form method settings stored next to the network.
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn encode_model(net: &MicroNet, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let header = ModelHeader {
        config: net.config().clone(),
        meta: meta.clone(),
    };
    let text = serde_json::to_string(&header).map_err(|e| Error::Model(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + text.len() + 4 * net.param_count());
    out.extend_from_slice(GPM_MAGIC);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(net.param_count() as u64).to_le_bytes());
    for &p in net.params() {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    Ok(out)
}

/// Decodes one record from the front of `bytes`; returns it with the
/// number of bytes consumed.
fn decode_record(bytes: &[u8]) -> Result<(MicroNet, serde_json::Value, usize)> {
    let bad = |m: &str| Error::Model(m.to_string());
    if bytes.len() < 8 || &bytes[..4] != GPM_MAGIC {
        return Err(bad("missing GPM magic"));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let rest = &bytes[8..];
    if rest.len() < hlen + 8 {
        return Err(bad("truncated header"));
    }
    let text = std::str::from_utf8(&rest[..hlen]).map_err(|_| bad("header is not UTF-8"))?;
    let header: ModelHeader = serde_json::from_str(text).map_err(|e| Error::Model(format!("header: {e}")))?;
    let count = u64::from_le_bytes(rest[hlen..hlen + 8].try_into().unwrap()) as usize;
    let payload = &rest[hlen + 8..];
    let need = count.saturating_mul(4);
    if payload.len() < need {
        return Err(Error::PayloadLength {
            expected: need,
            found: payload.len(),
        });
    }
    let params = payload[..need]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let net = MicroNet::from_params(header.config, params)?;
    Ok((net, header.meta, 8 + hlen + 8 + need))
}

pub fn decode_model(bytes: &[u8]) -> Result<(MicroNet, serde_json::Value)> {
    let (net, meta, used) = decode_record(bytes)?;
    if used != bytes.len() {
        return Err(Error::PayloadLength {
            expected: used,
            found: bytes.len(),
        });
    }
    Ok((net, meta))
}

/// Decodes a file holding several records back to back.
pub fn decode_models(bytes: &[u8]) -> Result<Vec<(MicroNet, serde_json::Value)>> {
    let mut out = Vec::new();
    let mut at = 0;
    while at < bytes.len() {
        let (net, meta, used) = decode_record(&bytes[at..])?;
        out.push((net, meta));
        at += used;
    }
    if out.is_empty() {
        return Err(Error::Model("empty model file".into()));
    }
    Ok(out)
}

pub fn save_model(net: &MicroNet, meta: &serde_json::Value, path: &Path) -> Result<()> {
    let bytes = encode_model(net, meta)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<(MicroNet, serde_json::Value)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}
