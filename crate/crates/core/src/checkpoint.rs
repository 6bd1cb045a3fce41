//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//! `"LAFS"`, u32 version, u32 entry count, then per entry u16 name length,
//! UTF-8 name, u8 ndim, ndim × u32 dims, f32 payload. Metadata travels as
//! the entry `__meta__`: one f32 per byte of a JSON object, which keeps the
//! layout uniform and the round trip bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::params::Params;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LAFS";
pub const VERSION: u32 = 1;
const META_ENTRY: &str = "__meta__";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends every parameter of `p` under `prefix`.
    pub fn add_params<P: Params + ?Sized>(&mut self, prefix: &str, p: &P) {
        for (name, t) in p.named() {
            self.entries.push((format!("{prefix}{name}"), t.clone()));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.entries.iter().any(|(n, _)| n.starts_with(prefix))
    }

    /// Overwrites every parameter of `p` from the entries under `prefix`.
    pub fn load_params<P: Params + ?Sized>(&self, prefix: &str, p: &mut P) -> Result<()> {
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        let mut sources = Vec::with_capacity(names.len());
        for n in &names {
            let full = format!("{prefix}{n}");
            sources.push(self.get(&full).ok_or(CheckpointError::MissingEntry(full))?);
        }
        for ((n, src), dst) in names.iter().zip(sources).zip(p.tensors_mut()) {
            if src.shape() != dst.shape() {
                return Err(CheckpointError::Corrupt(format!(
                    "entry {prefix}{n} has shape {:?}, model expects {:?}",
                    src.shape(),
                    dst.shape()
                ))
                .into());
            }
            *dst = src.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = if self.meta.is_empty() {
            None
        } else {
            let json = serde_json::to_vec(&self.meta).map_err(|e| Error::Contract(e.to_string()))?;
            let v: Vec<f32> = json.iter().map(|&b| b as f32).collect();
            Some(Tensor::new(&[v.len()], v)?)
        };
        let count = self.entries.len() + usize::from(meta.is_some());
        out.extend_from_slice(&u32::try_from(count).map_err(|_| Error::Contract("too many entries".into()))?.to_le_bytes());
        let mut seen = std::collections::HashSet::new();
        let all = self.entries.iter().map(|(n, t)| (n.as_str(), t)).chain(meta.iter().map(|t| (META_ENTRY, t)));
        for (name, t) in all {
            if !seen.insert(name) {
                return Err(Error::Contract(format!("duplicate checkpoint entry {name}")));
            }
            let len = u16::try_from(name.len()).map_err(|_| Error::Contract(format!("entry name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let shape = t.shape();
            out.push(u8::try_from(shape.len()).map_err(|_| Error::Contract("ndim exceeds 255".into()))?);
            for &d in shape {
                out.extend_from_slice(&u32::try_from(d).map_err(|_| Error::Contract("dim exceeds u32".into()))?.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        r.pos = 4;
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let count = r.u32()? as usize;
        let mut ck = Checkpoint::new();
        let mut seen = std::collections::HashSet::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CheckpointError::Corrupt("entry name is not UTF-8".into()))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(CheckpointError::Corrupt(format!("duplicate entry {name}")));
            }
            let ndim = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| CheckpointError::Corrupt(format!("entry {name} size overflows")))?;
            let payload = r.take(n)?;
            let data: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            if name == META_ENTRY {
                let raw: Vec<u8> = t.data().iter().map(|&v| v as u8).collect();
                ck.meta = serde_json::from_slice(&raw).map_err(|e| CheckpointError::Corrupt(format!("metadata: {e}")))?;
            } else {
                ck.entries.push((name, t));
            }
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} bytes follow the {count} entries declared in the header",
                bytes.len() - r.pos
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.entries.push(("a.w".into(), Tensor::new(&[2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e-30, -7.25]).unwrap()));
        c.entries.push(("b".into(), Tensor::new(&[], vec![0.1]).unwrap()));
        c.meta.insert("step".into(), "42".into());
        c
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let c = sample();
        let b1 = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&b1).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), b1);
        for ((_, x), (_, y)) in back.entries.iter().zip(&c.entries) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(x), bits(y));
        }
    }

    #[test]
    fn every_truncation_is_reported() {
        let b = sample().to_bytes().unwrap();
        for cut in 4..b.len() {
            assert!(matches!(Checkpoint::from_bytes(&b[..cut]), Err(CheckpointError::Truncated(_))), "cut {cut}");
        }
    }

    #[test]
    fn header_errors_are_distinct() {
        let mut b = sample().to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(b"LAF").unwrap_err(), CheckpointError::BadMagic);
        b[4] = 9;
        assert_eq!(Checkpoint::from_bytes(&b).unwrap_err(), CheckpointError::UnsupportedVersion(9));
        let codes: std::collections::HashSet<i32> = [
            CheckpointError::BadMagic,
            CheckpointError::UnsupportedVersion(2),
            CheckpointError::Truncated(0),
            CheckpointError::Corrupt(String::new()),
            CheckpointError::MissingEntry(String::new()),
        ]
        .iter()
        .map(|e| e.code())
        .collect();
        assert_eq!(codes.len(), 5);
    }

    #[test]
    fn count_mismatch_is_corruption() {
        let mut b = sample().to_bytes().unwrap();
        b[8] -= 1;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(CheckpointError::Corrupt(_))));
        let mut b = sample().to_bytes().unwrap();
        b[8] += 1;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(CheckpointError::Truncated(_))));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut c = sample();
        c.entries.push(("b".into(), Tensor::zeros(&[1])));
        assert!(c.to_bytes().is_err());
    }
}
