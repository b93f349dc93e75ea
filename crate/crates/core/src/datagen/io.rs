//! Frame files and dataset manifests.
//!
//! Frame file layout (little-endian): magic `GLS1`, `u32` t, c, h, w, then
//! `t*c*h*w` `f32` values in row-major order.

use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

pub const FRAME_MAGIC: &[u8; 4] = b"GLS1";

pub fn write_frames<W: Write>(out: &mut W, frames: &Tensor<f32>) -> Result<()> {
    if frames.rank() != 4 {
        return Err(Error::dim(format!("frames must be rank 4, got {:?}", frames.shape())));
    }
    let mut buf = Vec::with_capacity(20 + frames.numel() * 4);
    buf.extend_from_slice(FRAME_MAGIC);
    for &d in frames.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in frames.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Incremental reader: header first, then one frame at a time.
pub struct FrameReader<R> {
    input: R,
    path: PathBuf,
    pub t: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    read: usize,
    offset: u64,
}

impl<R: Read> FrameReader<R> {
    pub fn new(mut input: R, path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut header = [0u8; 20];
        read_full(&mut input, &mut header, &path, 0, "header")?;
        if &header[..4] != FRAME_MAGIC {
            return Err(Error::format(&path, 0, "bad magic, expected GLS1"));
        }
        let dim = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (t, c, h, w) = (dim(0), dim(1), dim(2), dim(3));
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::format(&path, 4, "zero frame extent"));
        }
        Ok(FrameReader { input, path, t, c, h, w, read: 0, offset: 20 })
    }

    pub fn frame_len(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Next `(c, h, w)` frame, `None` after the last one.
    pub fn next_frame(&mut self) -> Result<Option<Tensor<f32>>> {
        if self.read == self.t {
            return Ok(None);
        }
        let mut raw = vec![0u8; self.frame_len() * 4];
        read_full(&mut self.input, &mut raw, &self.path, self.offset, "frame data")?;
        self.offset += raw.len() as u64;
        self.read += 1;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        Tensor::new([self.c, self.h, self.w], data).map(Some)
    }

    pub fn read_all(mut self) -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(self.t * self.frame_len());
        while let Some(f) = self.next_frame()? {
            data.extend_from_slice(f.data());
        }
        let mut probe = [0u8; 1];
        if self.input.read(&mut probe)? != 0 {
            return Err(Error::format(&self.path, self.offset, "trailing bytes after last frame"));
        }
        Tensor::new([self.t, self.c, self.h, self.w], data)
    }
}

fn read_full<R: Read>(input: &mut R, buf: &mut [u8], path: &Path, offset: u64, what: &str) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match input.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(Error::format(path, offset + filled as u64, format!("truncated {what}")));
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

pub fn read_frames(path: &Path) -> Result<Tensor<f32>> {
    let f = std::fs::File::open(path)?;
    FrameReader::new(std::io::BufReader::new(f), path)?.read_all()
}

pub fn save_frames(path: &Path, frames: &Tensor<f32>) -> Result<()> {
    let mut buf = Vec::new();
    write_frames(&mut buf, frames)?;
    std::fs::write(path, buf)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// First line of a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub version: String,
    pub seed: u64,
    pub policy: String,
    pub vocab: Vec<String>,
}

/// One sample line of a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: u32,
    pub file: String,
    pub labels: Vec<usize>,
    pub boundaries: Vec<(usize, usize)>,
    pub signer_id: u32,
    pub speed: f64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = serde_json::to_string(&self.header)?;
        s.push('\n');
        for r in &self.samples {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = f.lines();
        let mut offset = 0u64;
        let first = lines.next().ok_or_else(|| Error::format(path, 0, "empty manifest"))??;
        let header: ManifestHeader =
            serde_json::from_str(&first).map_err(|e| Error::format(path, 0, format!("header: {e}")))?;
        offset += first.len() as u64 + 1;
        let mut samples = Vec::new();
        for line in lines {
            let line = line?;
            if !line.trim().is_empty() {
                let r: SampleRecord =
                    serde_json::from_str(&line).map_err(|e| Error::format(path, offset, e.to_string()))?;
                samples.push(r);
            }
            offset += line.len() as u64 + 1;
        }
        Ok(DatasetManifest { header, samples })
    }
}
