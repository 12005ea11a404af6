//! `CMTB` tensor bundle: a small binary container of named arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"CMTB"  u32 version  u32 count
//! count × { u32 name_len, name, u8 dtype, u32 rank, rank × u64 dim, u64 offset }
//! u64 payload_len  payload
//! ```
//!
//! `dtype` 0 is `f64`, 1 is raw bytes (rank 1). Offsets index into the payload
//! and entries are laid out back to back in header order.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"CMTB";
pub const VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_BYTES: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    F64(Tensor),
    Bytes(Vec<u8>),
}

impl Entry {
    fn byte_len(&self) -> usize {
        match self {
            Entry::F64(t) => 8 * t.numel(),
            Entry::Bytes(b) => b.len(),
        }
    }

    /// Bitwise equality (NaN payloads included).
    pub fn bit_eq(&self, other: &Entry) -> bool {
        match (self, other) {
            (Entry::F64(a), Entry::F64(b)) => a.bit_eq(b),
            (Entry::Bytes(a), Entry::Bytes(b)) => a == b,
            _ => false,
        }
    }
}

/// Named entries in insertion order; names are unique.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorBundle {
    entries: Vec<(String, Entry)>,
    names: HashSet<String>,
}

impl TensorBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, entry: Entry) -> Result<()> {
        let name = name.into();
        if !self.names.insert(name.clone()) {
            return Err(Error::Bundle(format!("duplicate entry name {name:?}")));
        }
        self.entries.push((name, entry));
        Ok(())
    }

    pub fn insert_tensor(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        self.insert(name, Entry::F64(t))
    }

    pub fn insert_bytes(&mut self, name: impl Into<String>, b: Vec<u8>) -> Result<()> {
        self.insert(name, Entry::Bytes(b))
    }

    pub fn entries(&self) -> &[(String, Entry)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.get(name) {
            Some(Entry::F64(t)) => Ok(t),
            Some(Entry::Bytes(_)) => Err(Error::Bundle(format!("entry {name:?} is not an f64 tensor"))),
            None => Err(Error::Missing {
                what: "bundle entry",
                name: name.to_string(),
            }),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name) {
            Some(Entry::Bytes(b)) => Ok(b),
            Some(Entry::F64(_)) => Err(Error::Bundle(format!("entry {name:?} is not a byte entry"))),
            None => Err(Error::Missing {
                what: "bundle entry",
                name: name.to_string(),
            }),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let (dtype, dims): (u8, Vec<usize>) = match entry {
                Entry::F64(t) => (DTYPE_F64, t.shape().to_vec()),
                Entry::Bytes(b) => (DTYPE_BYTES, vec![b.len()]),
            };
            out.push(dtype);
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += entry.byte_len() as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for (_, entry) in &self.entries {
            match entry {
                Entry::F64(t) => t.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Entry::Bytes(b) => out.extend_from_slice(b),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Bundle("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Bundle(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut headers = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Bundle("entry name is not UTF-8".into()))?;
            let dtype = r.u8()?;
            let rank = r.u32()? as usize;
            if rank > 16 {
                return Err(Error::Bundle(format!("entry {name:?} has implausible rank {rank}")));
            }
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()?;
            headers.push((name, dtype, dims, offset));
        }
        let payload_len = r.u64()?;
        let start = r.pos as u64;
        let available = bytes.len() as u64 - start;
        if available < payload_len {
            return Err(Error::Truncated {
                expected: start + payload_len,
                found: bytes.len() as u64,
            });
        }
        if available > payload_len {
            return Err(Error::Bundle(format!("{} trailing bytes after payload", available - payload_len)));
        }
        let payload = &bytes[r.pos..];

        let mut bundle = TensorBundle::new();
        let mut expected_offset = 0u64;
        for (name, dtype, dims, offset) in headers {
            if offset != expected_offset {
                return Err(Error::Bundle(format!(
                    "entry {name:?} at offset {offset}, expected {expected_offset}"
                )));
            }
            let numel = dims
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| Error::Bundle(format!("entry {name:?} size overflows")))?;
            let len = match dtype {
                DTYPE_F64 => numel.checked_mul(8),
                DTYPE_BYTES if dims.len() == 1 => Some(numel),
                _ => None,
            }
            .ok_or_else(|| Error::Bundle(format!("entry {name:?} has bad dtype {dtype} or rank")))?;
            let end = offset
                .checked_add(len)
                .filter(|&e| e <= payload_len)
                .ok_or_else(|| Error::Bundle(format!("entry {name:?} runs past the payload")))?;
            let raw = &payload[offset as usize..end as usize];
            let entry = if dtype == DTYPE_F64 {
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect();
                Entry::F64(Tensor::new(dims, data).map_err(|e| Error::Bundle(format!("entry {name:?}: {e}")))?)
            } else {
                Entry::Bytes(raw.to_vec())
            };
            bundle.insert(name, entry)?;
            expected_offset = end;
        }
        if expected_offset != payload_len {
            return Err(Error::Bundle("payload length disagrees with entries".into()));
        }
        Ok(bundle)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            expected: (self.pos + n) as u64,
            found: self.bytes.len() as u64,
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Writes f64 tensors under unique names.
pub fn write_bundle<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>, path: &Path) -> Result<()> {
    let mut b = TensorBundle::new();
    for (name, t) in tensors {
        b.insert_tensor(name, t.clone())?;
    }
    b.write(path)
}

/// Reads every f64 tensor of a bundle in stored order; byte entries are skipped.
pub fn read_bundle(path: &Path) -> Result<Vec<(String, Tensor)>> {
    Ok(TensorBundle::read(path)?
        .entries
        .into_iter()
        .filter_map(|(n, e)| match e {
            Entry::F64(t) => Some((n, t)),
            Entry::Bytes(_) => None,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SplitRng;
    use proptest::prelude::*;

    fn sample() -> TensorBundle {
        let mut rng = SplitRng::new(1);
        let mut b = TensorBundle::new();
        b.insert_tensor("w", Tensor::from_fn([3, 4], |_| rng.uniform(-1.0, 1.0))).unwrap();
        b.insert_tensor("s", Tensor::scalar(-0.0)).unwrap();
        b.insert_bytes("__config__", b"seed = 3\n".to_vec()).unwrap();
        b
    }

    #[test]
    fn round_trip_is_bitwise() {
        let b = sample();
        let back = TensorBundle::from_bytes(&b.to_bytes()).unwrap();
        assert_eq!(back.len(), 3);
        for ((n1, e1), (n2, e2)) in b.entries().iter().zip(back.entries()) {
            assert_eq!(n1, n2);
            assert!(e1.bit_eq(e2));
        }
        assert_eq!(back.tensor("s").unwrap().shape(), &[] as &[usize]);
        assert_eq!(back.tensor("s").unwrap().item().to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.cmtb");
        let t = Tensor::from_fn([3, 4], |i| i as f64 * 0.1);
        write_bundle([("t", &t)], &path).unwrap();
        let back = read_bundle(&path).unwrap();
        assert_eq!(back[0].0, "t");
        assert!(back[0].1.bit_eq(&t));
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = sample().to_bytes();
        let err = TensorBundle::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }), "{err}");
        let err = TensorBundle::from_bytes(&bytes[..10]).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }), "{err}");
    }

    #[test]
    fn bad_header_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(TensorBundle::from_bytes(&bytes).unwrap_err().to_string().contains("magic"));
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        assert!(TensorBundle::from_bytes(&bytes).unwrap_err().to_string().contains("version"));
        let mut bytes = sample().to_bytes();
        bytes.push(0);
        assert!(TensorBundle::from_bytes(&bytes).is_err());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut b = TensorBundle::new();
        b.insert_tensor("a", Tensor::scalar(1.0)).unwrap();
        assert!(b.insert_tensor("a", Tensor::scalar(2.0)).is_err());
        let t = Tensor::scalar(1.0);
        let dir = tempfile::tempdir().unwrap();
        assert!(write_bundle([("a", &t), ("a", &t)], &dir.path().join("d")).is_err());
    }

    #[test]
    fn wrong_kind_lookup() {
        let b = sample();
        assert!(b.tensor("__config__").is_err());
        assert!(b.bytes("w").is_err());
        assert!(matches!(b.tensor("nope"), Err(Error::Missing { .. })));
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        prop::collection::vec(1usize..4, 0..=4).prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO | prop::num::f64::SUBNORMAL, n)
                .prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn round_trip_identity(tensors in prop::collection::vec(arb_tensor(), 1..6)) {
            let mut b = TensorBundle::new();
            for (i, t) in tensors.iter().enumerate() {
                b.insert_tensor(format!("t{i}"), t.clone()).unwrap();
            }
            let back = TensorBundle::from_bytes(&b.to_bytes()).unwrap();
            prop_assert_eq!(back.len(), tensors.len());
            for (i, t) in tensors.iter().enumerate() {
                let name = format!("t{}", i);
                prop_assert!(back.tensor(&name).unwrap().bit_eq(t));
            }
        }
    }
}
