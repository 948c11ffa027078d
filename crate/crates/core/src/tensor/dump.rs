//! Binary tensor dump: `"MSTF"`, version `u32`, rank `u32`, extents
//! `u64[rank]`, dtype `u8` (0 = f32, 1 = f64), then row-major data. All
//! integers and floats little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{DType, Real, Tensor};
use crate::error::{Error, Result};

pub const DUMP_MAGIC: &[u8; 4] = b"MSTF";
pub const DUMP_VERSION: u32 = 1;

pub fn write_tensor_to<T: Real, W: Write>(tensor: &Tensor<T>, mut out: W) -> Result<()> {
    let mut buf = Vec::with_capacity(17 + 8 * tensor.rank() + tensor.numel() * T::DTYPE.size());
    buf.extend_from_slice(DUMP_MAGIC);
    buf.extend_from_slice(&DUMP_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &e in tensor.shape() {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    buf.push(T::DTYPE as u8);
    for &v in tensor.data() {
        v.write_le(&mut buf);
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Reads a dump of either dtype, converting to `T`.
pub fn read_tensor_from<T: Real, R: Read>(mut input: R) -> Result<Tensor<T>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(4)? != DUMP_MAGIC {
        return Err(Error::Format("bad magic, expected MSTF".into()));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if version != DUMP_VERSION {
        return Err(Error::Format(format!(
            "unsupported tensor dump version {version}"
        )));
    }
    let rank = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let e = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        shape.push(usize::try_from(e).map_err(|_| Error::Format(format!("extent {e} too large")))?);
    }
    let tag = cur.take(1)?[0];
    let dtype =
        DType::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown dtype tag {tag}")))?;
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Format("element count overflows".into()))?;
    let raw = cur.take(numel * dtype.size())?;
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    let data = match dtype {
        DType::F32 => raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::read_le(c)))
            .collect(),
    };
    Tensor::new(shape, data)
}

pub fn write_tensor<T: Real>(tensor: &Tensor<T>, path: &Path) -> Result<()> {
    write_tensor_to(tensor, fs::File::create(path)?)
}

pub fn read_tensor<T: Real>(path: &Path) -> Result<Tensor<T>> {
    read_tensor_from(fs::File::open(path)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated tensor dump".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}
