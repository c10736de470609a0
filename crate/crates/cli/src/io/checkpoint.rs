//! The `CADUF1` tensor container.
//!
//! Layout, all integers little-endian:
//! `"CADUF1"`, then the payload — entry count (u64), and per entry a name
//! (u64 byte length + UTF-8), rank (u64), dims (u64 each) and values (f64
//! each, row-major) — then the CRC32 of the payload (u32).

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use caduf::error::{Error, Result};
use caduf::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"CADUF1";

fn malformed(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

/// Named tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(malformed(format!("duplicate entry {name:?}")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| malformed(format!("missing entry {name:?}")))
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let put = |buf: &mut Vec<u8>, v: u64| buf.extend_from_slice(&v.to_le_bytes());
        put(&mut payload, self.entries.len() as u64);
        for (name, t) in &self.entries {
            put(&mut payload, name.len() as u64);
            payload.extend_from_slice(name.as_bytes());
            put(&mut payload, t.rank() as u64);
            for &d in t.shape() {
                put(&mut payload, d as u64);
            }
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&payload);
        let mut out = Vec::with_capacity(MAGIC.len() + payload.len() + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 12 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(malformed("not a CADUF1 container"));
        }
        let (payload, crc) = bytes[MAGIC.len()..].split_at(bytes.len() - MAGIC.len() - 4);
        let stored = u32::from_le_bytes(crc.try_into().expect("4 bytes"));
        if crc32fast::hash(payload) != stored {
            return Err(malformed("CRC mismatch"));
        }
        let mut r = Reader { buf: payload, pos: 0 };
        let count = r.u64()?;
        let mut seen = HashSet::new();
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = r.usize()?;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| malformed("entry name is not UTF-8"))?;
            if !seen.insert(name.clone()) {
                return Err(malformed(format!("duplicate entry {name:?}")));
            }
            let rank = r.usize()?;
            if rank > 8 {
                return Err(malformed(format!("entry {name:?} has rank {rank}")));
            }
            let shape: Vec<usize> = (0..rank).map(|_| r.usize()).collect::<Result<_>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= r.remaining() / 8)
                .ok_or_else(|| malformed(format!("entry {name:?} is truncated")))?;
            let data = r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            entries.push((name, Tensor::new(&shape, data)?));
        }
        if r.remaining() != 0 {
            return Err(malformed("trailing bytes after the last entry"));
        }
        Ok(Checkpoint { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| super::io_error(path, e))?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| super::io_error(path, e))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(malformed("unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| malformed("length overflows"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_corruption() {
        let mut c = Checkpoint::new();
        c.insert("a", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1)).unwrap();
        c.insert("b", Tensor::scalar(-1.5)).unwrap();
        assert!(c.insert("a", Tensor::scalar(0.0)).is_err());
        let bytes = c.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
