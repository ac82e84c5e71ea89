//! `VAEM` named-array container.
//!
//! ```text
//! magic    "VAEM"
//! version  u16 LE (= 1)
//! count    u32 LE
//! entry*   name_len u16 LE, name UTF-8,
//!          dtype u8 (0 = f32, 1 = u8), rank u8, dims u64 LE × rank,
//!          payload little-endian row-major
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VAEM";
pub const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayValue {
    F32(Tensor),
    /// Opaque bytes (used for checkpoint metadata).
    Bytes(Vec<u8>),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ArrayContainer {
    entries: Vec<(String, ArrayValue)>,
}

impl ArrayContainer {
    pub fn new() -> Self {
        Self::default()
    }

    fn check_new(&self, name: &str) -> Result<()> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::Format(format!("duplicate array name `{name}`")));
        }
        if name.len() > u16::MAX as usize {
            return Err(Error::Format("array name too long".into()));
        }
        Ok(())
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        self.check_new(&name)?;
        self.entries.push((name, ArrayValue::F32(value)));
        Ok(())
    }

    pub fn insert_bytes(&mut self, name: impl Into<String>, bytes: Vec<u8>) -> Result<()> {
        let name = name.into();
        self.check_new(&name)?;
        self.entries.push((name, ArrayValue::Bytes(bytes)));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find_map(|(n, v)| match v {
            ArrayValue::F32(t) if n == name => Some(t),
            _ => None,
        })
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Data(format!("array `{name}` not found")))
    }

    pub fn get_bytes(&self, name: &str) -> Option<&[u8]> {
        self.entries.iter().find_map(|(n, v)| match v {
            ArrayValue::Bytes(b) if n == name => Some(b.as_slice()),
            _ => None,
        })
    }

    pub fn entries(&self) -> &[(String, ArrayValue)] {
        &self.entries
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().filter_map(|(n, v)| match v {
            ArrayValue::F32(t) => Some((n.as_str(), t)),
            ArrayValue::Bytes(_) => None,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, value) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match value {
                ArrayValue::F32(t) => {
                    out.push(DTYPE_F32);
                    out.push(t.rank() as u8);
                    for &d in t.shape() {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                ArrayValue::Bytes(b) => {
                    out.push(DTYPE_U8);
                    out.push(1);
                    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
                    out.extend_from_slice(b);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not a VAEM container".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported container version {version} (expected {VERSION})"
            )));
        }
        let count = u32::from_le_bytes(r.array()?) as usize;
        let mut out = Self::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?
                .to_string();
            let dtype = r.take(1)?[0];
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(r.array()?) as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("shape overflow for `{name}`")))?;
            match dtype {
                DTYPE_F32 => {
                    let nbytes = numel
                        .checked_mul(4)
                        .ok_or_else(|| Error::Format(format!("shape overflow for `{name}`")))?;
                    let payload = r.take(nbytes)?;
                    let data = payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    let t = Tensor::new(shape, data)
                        .map_err(|e| Error::Format(format!("array `{name}`: {e}")))?;
                    out.insert(name, t)?;
                }
                DTYPE_U8 => {
                    let payload = r.take(numel)?.to_vec();
                    out.insert_bytes(name, payload)?;
                }
                other => {
                    return Err(Error::Format(format!(
                        "unknown dtype code {other} for `{name}`"
                    )))
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last entry",
                bytes.len() - r.pos
            )));
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated container: wanted {n} bytes at offset {}",
                    self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }
}

/// Writes named tensors to `path`.
pub fn write_array(path: &Path, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let mut c = ArrayContainer::new();
    for (name, t) in tensors {
        c.insert(*name, (*t).clone())?;
    }
    c.write(path)
}

/// Reads every `f32` entry of a container, in file order.
pub fn read_array(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let c = ArrayContainer::read(path)?;
    Ok(c.tensors()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ones_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.vaem");
        let x = Tensor::ones(&[2, 3]);
        write_array(&path, &[("x", &x)]).unwrap();
        let back = read_array(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].0, "x");
        assert!(back[0].1.bit_eq(&x));
    }

    #[test]
    fn empty_container_is_valid() {
        let c = ArrayContainer::new();
        let bytes = c.to_bytes();
        assert_eq!(bytes.len(), 10);
        assert!(ArrayContainer::from_bytes(&bytes).unwrap().is_empty());
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let mut c = ArrayContainer::new();
        c.insert("a", Tensor::ones(&[4])).unwrap();
        let good = c.to_bytes();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(ArrayContainer::from_bytes(&bad)
            .unwrap_err()
            .to_string()
            .contains("magic"));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(ArrayContainer::from_bytes(&bad)
            .unwrap_err()
            .to_string()
            .contains("version"));

        let err = ArrayContainer::from_bytes(&good[..good.len() - 1]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn rejects_duplicate_names() {
        let mut c = ArrayContainer::new();
        c.insert("a", Tensor::ones(&[1])).unwrap();
        assert!(matches!(
            c.insert("a", Tensor::ones(&[1])),
            Err(Error::Format(_))
        ));

        // A hand-built file with a duplicated entry is rejected on read.
        let mut one = ArrayContainer::new();
        one.insert("a", Tensor::ones(&[1])).unwrap();
        let bytes = one.to_bytes();
        let entry = &bytes[10..];
        let mut dup = bytes[..6].to_vec();
        dup.extend_from_slice(&2u32.to_le_bytes());
        dup.extend_from_slice(entry);
        dup.extend_from_slice(entry);
        assert!(ArrayContainer::from_bytes(&dup)
            .unwrap_err()
            .to_string()
            .contains("duplicate"));
    }

    #[test]
    fn byte_entries_round_trip() {
        let mut c = ArrayContainer::new();
        c.insert_bytes("meta", b"{\"k\":1}".to_vec()).unwrap();
        let back = ArrayContainer::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.get_bytes("meta"), Some(&b"{\"k\":1}"[..]));
        assert!(back.get("meta").is_none());
    }

    proptest! {
        #[test]
        fn write_read_is_identity(
            shapes in prop::collection::vec(prop::collection::vec(1usize..5, 1..4), 0..5),
            seed in any::<u32>(),
        ) {
            let mut c = ArrayContainer::new();
            let mut state = seed;
            for (i, shape) in shapes.iter().enumerate() {
                let t = Tensor::from_fn(shape, |_| {
                    state = state.wrapping_mul(1_664_525).wrapping_add(1_013_904_223);
                    f32::from_bits(state & 0x7f7f_ffff) * if state & 1 == 0 { 1.0 } else { -1.0 }
                });
                c.insert(format!("t{i}"), t).unwrap();
            }
            let bytes = c.to_bytes();
            let back = ArrayContainer::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            for ((_, a), (_, b)) in c.tensors().zip(back.tensors()) {
                prop_assert!(a.bit_eq(b));
            }
        }
    }
}
