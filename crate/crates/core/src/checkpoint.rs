//! Parameter checkpoint container.
//!
//! ```text
//! "SA2S" | version u16 | count u32
//! count × { name_len u16 | name (UTF-8) | rank u8 | rank × dim u32 | f32 values }
//! meta_len u32 | metadata (UTF-8 `key=value` lines)
//! ```
//!
//! Little-endian throughout. Values are stored at 32-bit precision, so a
//! save/load/save cycle is byte-identical.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::params::ParameterStore;

pub const MAGIC: &[u8; 4] = b"SA2S";
pub const VERSION: u16 = 1;

/// Config echo and epoch counters carried alongside the weights.
pub type Metadata = BTreeMap<String, String>;

pub fn encode(params: &ParameterStore, meta: &Metadata) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * params.scalar_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let shape = p.value.shape();
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let text: String = meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(Error::Checkpoint {
            offset: self.pos,
            reason: reason.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.bytes.len() => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => self.fail(format!("truncated {what}")),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<&'a str> {
        let start = self.pos;
        let raw = self.take(n, what)?;
        std::str::from_utf8(raw).map_err(|e| Error::Checkpoint {
            offset: start + e.valid_up_to(),
            reason: format!("invalid UTF-8 in {what}"),
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ParameterStore, Metadata)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return r.fail("bad magic");
    }
    let version = r.u16("version")?;
    if version != VERSION {
        r.pos -= 2;
        return r.fail(format!("unsupported version {version}"));
    }
    let count = r.u32("entry count")?;
    let mut params = ParameterStore::new();
    for _ in 0..count {
        let entry_start = r.pos;
        let name_len = r.u16("name length")? as usize;
        let name = r.utf8(name_len, "name")?.to_string();
        let rank = r.u8("rank")? as usize;
        if rank > 2 {
            r.pos -= 1;
            return r.fail(format!("rank {rank} unsupported"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4));
        let Some(n_bytes) = n else {
            return r.fail("dimensions overflow");
        };
        let raw = r.take(n_bytes, "values")?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return r.fail(format!("non-finite value in {name}"));
        }
        let value = Array::new(shape, data)?;
        if params.insert(name.clone(), value).is_err() {
            r.pos = entry_start;
            return r.fail(format!("duplicate parameter {name}"));
        }
    }
    let meta_len = r.u32("metadata length")? as usize;
    let text = r.utf8(meta_len, "metadata")?;
    let mut meta = Metadata::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        match line.split_once('=') {
            Some((k, v)) => {
                meta.insert(k.to_string(), v.to_string());
            }
            None => return r.fail(format!("metadata line without '=': {line}")),
        }
    }
    if r.pos != bytes.len() {
        return r.fail(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok((params, meta))
}

/// Writes through a temporary sibling file and renames it into place.
pub fn save_checkpoint(path: impl AsRef<Path>, params: &ParameterStore, meta: &Metadata) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    let bytes = encode(params, meta);
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ParameterStore, Metadata)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("b.bias", Array::row_vector(vec![0.1, -0.2])).unwrap();
        s.insert("a.w", Array::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.5]).unwrap()).unwrap();
        s.insert("c.scalar", Array::scalar(std::f64::consts::PI)).unwrap();
        s
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let meta = Metadata::from([("epoch".to_string(), "3".to_string())]);
        let first = encode(&store(), &meta);
        let (params, meta2) = decode(&first).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(encode(&params, &meta2), first);
        let names: Vec<_> = params.names().collect();
        assert_eq!(names, vec!["a.w", "b.bias", "c.scalar"]);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let bytes = encode(&store(), &Metadata::new());
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Checkpoint { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        let err = decode(&bad).unwrap_err().to_string();
        assert!(err.contains("version") && err.contains("byte 4"), "{err}");
        for cut in [3, 9, 20, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Checkpoint { .. })), "cut {cut}");
        }
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sa2s");
        save_checkpoint(&path, &store(), &Metadata::new()).unwrap();
        let (p, _) = load_checkpoint(&path).unwrap();
        assert_eq!(p.len(), 3);
        assert!(!path.with_extension("tmp").exists());
    }
}
