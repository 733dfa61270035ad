//! "NART" binary tensor blobs.
//!
//! Layout (little-endian): magic `NART`, version `u32`, dtype code `u8`,
//! rank `u32`, one `u64` per extent, then the row-major payload.
//! Dtype codes: 0 = f64, 1 = u16, 2 = f32.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"NART";
pub const VERSION: u32 = 1;
pub const DTYPE_U16: u8 = 1;

fn header(out: &mut Vec<u8>, dtype: u8, shape: &[usize]) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

pub fn encode<S: Scalar>(t: &Tensor<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.rank() + t.len() * S::BYTES);
    header(&mut out, S::DTYPE_CODE, t.shape());
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn encode_u16(shape: &[usize], values: &[u16]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * shape.len() + values.len() * 2);
    header(&mut out, DTYPE_U16, shape);
    for &v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                path: self.what.to_string(),
                reason: format!(
                    "truncated payload: need {} bytes at offset {}, have {}",
                    n,
                    self.pos,
                    self.bytes.len()
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_header<'a>(bytes: &'a [u8], what: &'a str) -> Result<(u8, Vec<usize>, Cursor<'a>)> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        what,
    };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format {
            path: what.to_string(),
            reason: "bad magic".into(),
        });
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            what: what.to_string(),
            found: version,
            expected: VERSION,
        });
    }
    let dtype = cur.take(1)?[0];
    let rank = cur.u32()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(cur.u64()? as usize);
    }
    Ok((dtype, shape, cur))
}

/// Decode one blob from the front of `bytes`; returns the tensor and the
/// number of bytes consumed.
pub fn decode_prefix<S: Scalar>(bytes: &[u8], what: &str) -> Result<(Tensor<S>, usize)> {
    let (dtype, shape, mut cur) = read_header(bytes, what)?;
    if dtype != S::DTYPE_CODE {
        return Err(Error::Format {
            path: what.to_string(),
            reason: format!("dtype code {} where {} expected", dtype, S::DTYPE_CODE),
        });
    }
    let n = numel(&shape);
    let payload = cur.take(n * S::BYTES)?;
    let data = payload.chunks_exact(S::BYTES).map(S::read_le).collect();
    Ok((Tensor::new(&shape, data)?, cur.pos))
}

pub fn decode<S: Scalar>(bytes: &[u8], what: &str) -> Result<Tensor<S>> {
    let (t, used) = decode_prefix(bytes, what)?;
    if used != bytes.len() {
        return Err(Error::Format {
            path: what.to_string(),
            reason: format!("{} trailing bytes", bytes.len() - used),
        });
    }
    Ok(t)
}

pub fn decode_u16(bytes: &[u8], what: &str) -> Result<(Vec<usize>, Vec<u16>)> {
    let (dtype, shape, mut cur) = read_header(bytes, what)?;
    if dtype != DTYPE_U16 {
        return Err(Error::Format {
            path: what.to_string(),
            reason: format!("dtype code {} where u16 expected", dtype),
        });
    }
    let n = numel(&shape);
    let payload = cur.take(n * 2)?;
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            path: what.to_string(),
            reason: "trailing bytes".into(),
        });
    }
    let values = payload
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    Ok((shape, values))
}

pub fn write_to<S: Scalar>(t: &Tensor<S>, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(&encode(t))
}

pub fn read_from<S: Scalar>(r: &mut impl Read, what: &str) -> Result<Tensor<S>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::io(what, e))?;
    decode(&buf, what)
}
