//! Named-array checkpoint files.
//!
//! Layout (little-endian): magic `GFW1`, `u32` array count, then per array a
//! `u16` name length, UTF-8 name, `u8` rank, `rank` x `u32` extents and the
//! values as `f32`.

use std::io::{Read, Write};
use std::path::Path;

use super::{Real, Tensor};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GFW1";

pub fn write_checkpoint<T: Real, W: Write>(out: &mut W, arrays: &[(String, &Tensor<T>)]) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for (name, t) in arrays {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| Error::Usage(format!("array name too long: {name}")))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(bytes)?;
        out.write_all(&[t.rank() as u8])?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for &v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.path, self.pos as u64, format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint<T: Real, R: Read>(input: &mut R, path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0, path };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, 0, "bad magic, expected GFW1"));
    }
    let count = c.u32("array count")?;
    let mut arrays = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(c.take(2, "name length")?.try_into().unwrap()) as usize;
        let at = c.pos;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::format(path, at as u64, "array name is not UTF-8"))?
            .to_string();
        let rank = c.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let at = c.pos;
        let raw = c.take(n * 4, "values")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format(path, at as u64, e.to_string()))?;
        arrays.push((name, t));
    }
    if c.pos != buf.len() {
        return Err(Error::format(path, c.pos as u64, "trailing bytes after last array"));
    }
    Ok(arrays)
}
