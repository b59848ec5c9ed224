//! The `MGIT` binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MGIT" | version u32 = 1 | dtype u8 = 1 (f64) | ndim u8 | dims u64 × ndim | payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MGIT";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 1;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let shape = t.shape();
    let mut out = Vec::with_capacity(10 + 8 * shape.len() + 8 * t.numel());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F64);
    out.push(u8::try_from(shape.len()).expect("rank fits in a byte"));
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(FormatError::Truncated {
                needed: end,
                found: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic).into());
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let dtype = r.take(1)?[0];
    if dtype != DTYPE_F64 {
        return Err(FormatError::UnsupportedDtype(dtype).into());
    }
    let ndim = r.take(1)?[0] as usize;
    let dims = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
    if dims.contains(&0) || dims.iter().any(|&d| d > u32::MAX as u64) {
        return Err(FormatError::BadShape(dims).into());
    }
    let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|n| n.checked_mul(8).is_some())
        .ok_or_else(|| FormatError::BadShape(dims.clone()))?;
    let payload = r.take(numel * 8)?;
    if r.pos != bytes.len() {
        return Err(FormatError::TrailingBytes(bytes.len() - r.pos).into());
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
