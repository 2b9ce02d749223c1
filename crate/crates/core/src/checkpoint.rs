//! Named-tensor checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "RCHNCKPT"
//! version      u32      1
//! count        u32
//! count x {
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   rank       u32
//!   dims       rank x u64
//!   payload    prod(dims) x f32
//! }
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RCHNCKPT";
pub const VERSION: u32 = 1;

pub fn encode(entries: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let payload: usize = entries.iter().map(|(n, t)| 8 + n.len() + 8 * t.rank() + 4 * t.numel()).sum();
    let mut out = Vec::with_capacity(16 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Invalid(format!("checkpoint truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
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

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Invalid("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Invalid(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Invalid("checkpoint tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Invalid(format!("tensor {name} is too large")))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Invalid(format!("tensor {name} is too large")))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        entries.push((name, Tensor::new(&dims, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Invalid(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    Ok(entries)
}

pub fn save(path: &Path, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    fs::write(path, encode(entries)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Invalid(reason) => Error::Validation { path: path.to_path_buf(), reason },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let bytes = encode(&[("w".into(), Tensor::new(&[2], vec![1.0, -0.0]).unwrap())]);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 4 + 1 + 4 + 8 + 8);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let good = encode(&[("a".into(), Tensor::zeros(&[3, 2]))]);
        assert!(decode(&good[..good.len() - 1]).is_err());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = good;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            tensors in prop::collection::vec(
                (("[a-z.]{1,12}"), prop::collection::vec(1usize..4, 0..4))
                    .prop_flat_map(|(name, dims)| {
                        let n: usize = dims.iter().product();
                        (Just(name), Just(dims), prop::collection::vec(any::<u32>().prop_map(f32::from_bits), n))
                    }),
                0..5,
            )
        ) {
            let entries: Vec<(String, Tensor<f32>)> = tensors
                .into_iter()
                .map(|(name, dims, data)| (name, Tensor::new(&dims, data).unwrap()))
                .collect();
            let decoded = decode(&encode(&entries)).unwrap();
            prop_assert_eq!(decoded.len(), entries.len());
            for ((n1, t1), (n2, t2)) in entries.iter().zip(&decoded) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
                let b2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(b1, b2);
            }
        }
    }
}
