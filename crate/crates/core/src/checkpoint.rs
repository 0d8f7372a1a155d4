//! Binary tensor archive shared by checkpoints and sample dumps.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "JEMLAB01"
//! dtype    u8       1 = f32, 2 = f64
//! count    u32      number of entries
//! entry*:
//!   name_len u32, name (UTF-8)
//!   rank     u32, extents (u64 each)
//!   values   row-major, dtype width each
//! ```

use std::fs;
use std::path::Path;

use crate::autodiff::{DType, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"JEMLAB01";

pub fn encode<T: Real>(entries: &[(String, Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.tag());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("checkpoint", "truncated payload"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads the dtype tag without decoding the payload.
pub fn peek_dtype(bytes: &[u8]) -> Result<DType> {
    if bytes.len() < 9 || &bytes[..8] != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    DType::from_tag(bytes[8]).ok_or_else(|| Error::format("checkpoint", format!("unknown dtype tag {}", bytes[8])))
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let dtype = peek_dtype(bytes)?;
    if dtype != T::DTYPE {
        return Err(Error::format(
            "checkpoint",
            format!("stored as {:?}, requested {:?}", dtype, T::DTYPE),
        ));
    }
    let mut r = Reader { bytes, pos: 9 };
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::format("checkpoint", "entry name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format("checkpoint", "extent overflow"))?;
        let width = dtype.width();
        let raw = r.take(numel.checked_mul(width).ok_or_else(|| Error::format("checkpoint", "extent overflow"))?)?;
        let data = raw.chunks_exact(width).map(T::read_le).collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::format("checkpoint", "trailing bytes"));
    }
    Ok(entries)
}

pub fn save<T: Real>(path: &Path, entries: &[(String, Tensor<T>)]) -> Result<()> {
    fs::write(path, encode(entries)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let entries = vec![("w".to_string(), Tensor::from_vec(vec![1.0f32, 2.0, 3.0]))];
        let bytes = encode(&entries);
        assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<f32>(&bad).is_err());
        assert!(decode::<f64>(&bytes).is_err());
    }

    #[test]
    fn header_layout() {
        let entries = vec![("ab".to_string(), Tensor::<f64>::scalar(1.5))];
        let bytes = encode(&entries);
        assert_eq!(&bytes[..8], b"JEMLAB01");
        assert_eq!(bytes[8], 2);
        assert_eq!(&bytes[9..13], &1u32.to_le_bytes());
        assert_eq!(&bytes[13..17], &2u32.to_le_bytes());
        assert_eq!(&bytes[17..19], b"ab");
        assert_eq!(&bytes[19..23], &0u32.to_le_bytes());
        assert_eq!(&bytes[23..31], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 31);
    }

    proptest! {
        #[test]
        fn round_trip(values in proptest::collection::vec(-1e6f32..1e6, 0..40), cols in 1usize..5) {
            let rows = values.len() / cols;
            let data = values[..rows * cols].to_vec();
            let entries = vec![
                ("layer.weight".to_string(), Tensor::new(vec![rows, cols], data).unwrap()),
                ("scalar".to_string(), Tensor::scalar(0.25f32)),
            ];
            let back = decode::<f32>(&encode(&entries)).unwrap();
            prop_assert_eq!(back, entries);
        }
    }
}
