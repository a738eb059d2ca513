//! Binary checkpoint container.
//!
//! Layout: the ASCII magic `ULDA1`, followed by zero or more records until
//! end of file. Each record is
//!
//! ```text
//! u32 name_len | name (UTF-8) | u32 rank | rank × u32 dims | Π dims × f32
//! ```
//!
//! with every integer and float little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"ULDA1";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write_checkpoint(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    for t in tensors {
        let expected: usize = t.dims.iter().product();
        if expected != t.data.len() {
            return Err(Error::Shape {
                op: "write_checkpoint",
                lhs: t.dims.clone(),
                rhs: vec![t.data.len()],
            });
        }
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for &d in &t.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
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

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        pos: 0,
    };
    if r.take(CHECKPOINT_MAGIC.len(), "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, 0, "bad magic, expected ULDA1"));
    }
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let start = r.pos as u64;
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::format(path, start + 4, "parameter name is not UTF-8"))?
            .to_owned();
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::format(
                path,
                r.pos as u64 - 4,
                format!("implausible rank {rank}"),
            ));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dimension")? as usize);
        }
        let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let numel = numel
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or_else(|| Error::format(path, r.pos as u64, "dimension product overflows"))?;
        let raw = r.take(numel * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(NamedTensor { name, dims, data });
    }
    Ok(out)
}
