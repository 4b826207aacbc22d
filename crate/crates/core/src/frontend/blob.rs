//! Binary feature blob:
//!
//! ```text
//! "LFBE" | version u16 | T u32 | F u32 | T·F f32 (row-major) | T mask bytes
//! ```
//!
//! All integers and floats little-endian. Mask bytes are 0 or 1.

use super::FeatureMatrix;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LFBE";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4;

pub fn encode(feats: &FeatureMatrix) -> Vec<u8> {
    let (t, f) = (feats.n_frames(), feats.n_bins());
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t * f + t);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(f as u32).to_le_bytes());
    for &v in feats.frames() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.extend(feats.mask().iter().map(|&m| u8::from(m)));
    out
}

fn malformed(offset: usize, reason: impl std::fmt::Display) -> Error {
    Error::InvalidFeatures(format!("blob byte {offset}: {reason}"))
}

pub fn decode(bytes: &[u8]) -> Result<FeatureMatrix> {
    if bytes.len() < HEADER_LEN {
        return Err(malformed(bytes.len(), "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(malformed(0, "bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(malformed(4, format!("unsupported version {version}")));
    }
    let t = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let body = t
        .checked_mul(f)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(t))
        .ok_or_else(|| malformed(6, "dimensions overflow"))?;
    let rest = &bytes[HEADER_LEN..];
    if rest.len() != body {
        return Err(malformed(
            HEADER_LEN + rest.len().min(body),
            format!("expected {body} payload bytes, found {}", rest.len()),
        ));
    }
    let (values, mask_bytes) = rest.split_at(4 * t * f);
    let frames = values
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    let mask = mask_bytes
        .iter()
        .enumerate()
        .map(|(i, &b)| match b {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(malformed(HEADER_LEN + 4 * t * f + i, format!("mask byte {b}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    FeatureMatrix::new(frames, t, f, mask)
}
