//! PXB1 binary tensor files.
//!
//! Layout: magic `PXB1`, little-endian `u32` dtype code (1 = f64), `u32` rank,
//! `rank` little-endian `u64` dims, then the row-major little-endian payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Matrix;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"PXB1";
pub const DTYPE_F64: u32 = 1;

/// N-dimensional array as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::usage(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    /// Rank 2 maps directly; rank 1 becomes a single row; rank 0 a 1x1.
    pub fn into_matrix(self) -> Result<Matrix> {
        match self.dims.as_slice() {
            [] => Matrix::from_vec(1, 1, self.data),
            [n] => Matrix::from_vec(1, *n, self.data),
            [r, c] => Matrix::from_vec(*r, *c, self.data),
            d => Err(Error::usage(format!("rank-{} tensor is not a matrix", d.len()))),
        }
    }
}

impl From<&Matrix> for Tensor {
    fn from(m: &Matrix) -> Self {
        Tensor {
            dims: vec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        }
    }
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * t.dims.len() + 8 * t.data.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&DTYPE_F64.to_le_bytes());
    out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    for &d in &t.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor { buf, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:02x?}, expected PXB1")));
    }
    let dtype = cur.u32("dtype")?;
    if dtype != DTYPE_F64 {
        return Err(Error::format(4, format!("unsupported dtype code {dtype}")));
    }
    let rank = cur.u32("rank")? as usize;
    let mut dims = Vec::with_capacity(rank.min(16));
    for _ in 0..rank {
        let at = cur.pos as u64;
        let d = cur.u64("dimension")?;
        dims.push(usize::try_from(d).map_err(|_| Error::format(at, "dimension overflows usize"))?);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::format(cur.pos as u64, "payload size overflows"))?;
    let payload = cur.take(count, "payload")?;
    if cur.pos != buf.len() {
        return Err(Error::format(
            cur.pos as u64,
            format!("{} trailing bytes after payload", buf.len() - cur.pos),
        ));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor { dims, data })
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&fs::read(path)?)
}

pub fn write_matrix(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    write_tensor(path, &Tensor::from(m))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    read_tensor(path)?.into_matrix()
}
