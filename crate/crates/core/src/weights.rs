//! Named parameter container and its binary file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"YOTO"  u32 version=1  u32 count
//! count × { u16 name_len, name (UTF-8), u8 rank, rank × u32 dim, u64 data_offset }
//! f32 data of every entry, in entry order, contiguous
//! ```
//!
//! `data_offset` is absolute from the start of the file.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use unifiq_tensor::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"YOTO";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    entries: IndexMap<String, Tensor<f32>>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an entry; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(Error::contract(format!("invalid weight name length {}", name.len())));
        }
        if self.entries.contains_key(&name) {
            return Err(Error::contract(format!("duplicate weight name {name:?}")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.entries.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor<f32>> {
        self.entries.values_mut()
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Entry-by-entry bitwise equality, including order.
    pub fn bit_eq(&self, other: &WeightStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header_len: usize = 12
            + self
                .entries
                .iter()
                .map(|(name, t)| 2 + name.len() + 1 + 4 * t.rank() + 8)
                .sum::<usize>();
        let mut out = Vec::with_capacity(header_len + 4 * self.num_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut offset = header_len as u64;
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * t.numel() as u64;
        }
        for t in self.entries.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a whole weights file. Any inconsistency is a format error
    /// carrying the byte offset where it was detected; nothing is returned
    /// on failure.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(4)? != MAGIC {
            return Err(Error::format(origin, 0, "bad magic, expected YOTO"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(origin, 4, format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut headers = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let at = r.pos;
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(origin, at as u64 + 2, "weight name is not UTF-8"))?
                .to_string();
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let at = r.pos;
                let d = r.u32()? as usize;
                if d == 0 {
                    return Err(Error::format(origin, at as u64, "zero dimension"));
                }
                shape.push(d);
            }
            let off_at = r.pos;
            let offset = r.u64()?;
            headers.push((at, name, shape, off_at, offset));
        }

        let mut store = WeightStore::new();
        let mut expected = r.pos as u64;
        for (at, name, shape, off_at, offset) in headers {
            if offset != expected {
                return Err(Error::format(
                    origin,
                    off_at as u64,
                    format!("entry {name:?} data offset {offset}, expected {expected}"),
                ));
            }
            let numel: usize = shape.iter().product();
            let start = offset as usize;
            let end = start
                .checked_add(numel * 4)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| Error::format(origin, bytes.len() as u64, format!("data of {name:?} truncated")))?;
            let data = bytes[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|e| Error::format(origin, at as u64, e.to_string()))?;
            if store.entries.contains_key(&name) {
                return Err(Error::format(origin, at as u64, format!("duplicate entry {name:?}")));
            }
            store.entries.insert(name, tensor);
            expected = end as u64;
        }
        if expected as usize != bytes.len() {
            return Err(Error::format(
                origin,
                expected,
                format!("{} trailing bytes", bytes.len() - expected as usize),
            ));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::format(
                self.origin,
                self.bytes.len() as u64,
                "unexpected end of header",
            ));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> WeightStore {
        let mut w = WeightStore::new();
        w.insert(
            "a.w",
            Tensor::new([2, 3], vec![1.0, -2.5, 0.0, -0.0, f32::MIN_POSITIVE, 7.0]).unwrap(),
        )
        .unwrap();
        w.insert("a.b", Tensor::new([3], vec![0.1, 0.2, 0.3]).unwrap()).unwrap();
        w.insert("s", Tensor::scalar(4.0)).unwrap();
        w
    }

    #[test]
    fn layout_is_exact() {
        let b = sample().to_bytes();
        assert_eq!(&b[..4], b"YOTO");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 3);
        // first entry: name "a.w", rank 2, dims 2 and 3
        assert_eq!(&b[12..14], &3u16.to_le_bytes());
        assert_eq!(&b[14..17], b"a.w");
        assert_eq!(b[17], 2);
        let header = 12 + (2 + 3 + 1 + 8 + 8) + (2 + 3 + 1 + 4 + 8) + (2 + 1 + 1 + 8);
        assert_eq!(u64::from_le_bytes(b[26..34].try_into().unwrap()), header as u64);
        assert_eq!(b.len(), header + 4 * 10);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let w = sample();
        let bytes = w.to_bytes();
        let back = WeightStore::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert!(back.bit_eq(&w));
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_corruption_with_offsets() {
        let bytes = sample().to_bytes();
        let p = Path::new("mem");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            WeightStore::from_bytes(&bad, p),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            WeightStore::from_bytes(&bad, p),
            Err(Error::Format { offset: 4, .. })
        ));
        let mut bad = bytes.clone();
        bad[26] ^= 1;
        assert!(matches!(
            WeightStore::from_bytes(&bad, p),
            Err(Error::Format { offset: 26, .. })
        ));
        assert!(WeightStore::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(WeightStore::from_bytes(&long, p).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut w = sample();
        assert!(w.insert("s", Tensor::scalar(1.0)).is_err());
        let mut bytes = sample().to_bytes();
        // rename "a.b" to "a.w"
        let pos = bytes.windows(3).position(|s| s == b"a.b").unwrap();
        bytes[pos + 2] = b'w';
        assert!(matches!(
            WeightStore::from_bytes(&bytes, Path::new("m")),
            Err(Error::Format { .. })
        ));
    }
}
