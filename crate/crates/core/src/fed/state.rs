use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FLRA";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Low-rank factors of one adapted projection.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair {
    pub a: Tensor,
    pub b: Tensor,
}

/// Every adapter of a model keyed by path, plus the fingerprint of the
/// frozen network they belong to. This is the only model state that
/// crosses the client/server boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraStateDict {
    fingerprint: [u8; 32],
    entries: BTreeMap<String, AdapterPair>,
}

impl LoraStateDict {
    pub fn new(fingerprint: [u8; 32], entries: BTreeMap<String, AdapterPair>) -> Self {
        Self {
            fingerprint,
            entries,
        }
    }

    pub fn fingerprint(&self) -> &[u8; 32] {
        &self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, path: &str) -> Option<&AdapterPair> {
        self.entries.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut AdapterPair> {
        self.entries.get_mut(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &AdapterPair)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut AdapterPair)> {
        self.entries.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Total number of adapter scalars.
    pub fn element_count(&self) -> usize {
        self.entries.values().map(|p| p.a.len() + p.b.len()).sum()
    }

    /// Applies `f` to every scalar.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|(k, p)| {
                (
                    k.clone(),
                    AdapterPair {
                        a: p.a.map(&f),
                        b: p.b.map(&f),
                    },
                )
            })
            .collect();
        Self::new(self.fingerprint, entries)
    }

    /// Size in bytes of [`Self::to_bytes`].
    pub fn serialized_size(&self) -> usize {
        4 + 2 + 32 + 4
            + self
                .entries
                .iter()
                .map(|(k, p)| 2 + k.len() + 16 + 8 * (p.a.len() + p.b.len()))
                .sum::<usize>()
    }

    /// Binary checkpoint: magic `FLRA`, `u16` version, 32-byte fingerprint,
    /// `u32` adapter count, then per adapter a `u16`-prefixed UTF-8 path,
    /// `u32` rows/cols of A and of B, and the row-major `f64` values of A
    /// then B. All integers and floats little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.serialized_size());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.fingerprint);
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (path, pair) in &self.entries {
            buf.extend_from_slice(&(path.len() as u16).to_le_bytes());
            buf.extend_from_slice(path.as_bytes());
            for t in [&pair.a, &pair.b] {
                let (r, c) = t.dims2().expect("adapters are matrices");
                buf.extend_from_slice(&(r as u32).to_le_bytes());
                buf.extend_from_slice(&(c as u32).to_le_bytes());
            }
            for t in [&pair.a, &pair.b] {
                for v in t.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let fingerprint: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let count = r.u32()? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let path = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("adapter path is not UTF-8".into()))?
                .to_string();
            let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|d| d as usize);
            let a = r.matrix(dims[0], dims[1])?;
            let b = r.matrix(dims[2], dims[3])?;
            if entries.insert(path.clone(), AdapterPair { a, b }).is_some() {
                return Err(Error::Checkpoint(format!("duplicate adapter `{path}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after last adapter",
                bytes.len() - r.pos
            )));
        }
        Ok(Self::new(fingerprint, entries))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Tensor> {
        let n = rows
            .checked_mul(cols)
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Checkpoint(format!("invalid adapter shape {rows}×{cols}")))?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("adapter too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::new(&[rows, cols], data)?)
    }
}
