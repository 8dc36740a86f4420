//! `UTT1` binary tensor files.
//!
//! Layout: magic `UTT1`, `u32` LE rank, `rank × u64` LE extents, then the
//! values as `f64` LE in row-major order. Nothing follows the values.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"UTT1";

pub fn encode<S: Scalar>(t: &Tensor<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.dims().len() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected UTT1"));
    }
    let rank = u32::from_le_bytes(r.take(4, "rank")?.try_into().expect("4 bytes")) as usize;
    if rank == 0 {
        return Err(Error::format(4, "rank 0"));
    }
    let mut dims = Vec::with_capacity(rank.min(16));
    let mut len: u64 = 1;
    for _ in 0..rank {
        let at = r.pos as u64;
        let d = u64::from_le_bytes(r.take(8, "extent")?.try_into().expect("8 bytes"));
        if d == 0 {
            return Err(Error::format(at, "zero extent"));
        }
        len = len
            .checked_mul(d)
            .ok_or_else(|| Error::format(at, "extent product overflows"))?;
        dims.push(d as usize);
    }
    let need = len
        .checked_mul(8)
        .ok_or_else(|| Error::format(r.pos as u64, "payload size overflows"))?;
    if (bytes.len() - r.pos) as u64 != need {
        return Err(Error::format(
            r.pos as u64,
            format!(
                "payload holds {} bytes, extents need {need}",
                bytes.len() - r.pos
            ),
        ));
    }
    let values = r
        .take(need as usize, "payload")?
        .chunks_exact(8)
        .map(|c| S::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect();
    Tensor::new(&dims, values, false)
}

/// Writes via a temporary sibling and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save<S: Scalar>(t: &Tensor<S>, path: &Path) -> Result<()> {
    write_atomic(path, &encode(t))
}

pub fn load<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    decode(&fs::read(path)?)
}
