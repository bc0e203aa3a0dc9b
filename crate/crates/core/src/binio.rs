//! Little-endian helpers for the fixed-layout binary formats.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4]) -> Self {
        Writer { buf: magic.to_vec() }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::InvalidShape(format!("{v} does not fit in u32")))?;
        self.buf.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    pub fn f32(&mut self, v: f64) {
        self.buf.extend_from_slice(&(v as f32).to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::TruncatedFile {
                expected: 4,
                found: bytes.len(),
            });
        }
        let found: [u8; 4] = bytes[..4].try_into().unwrap();
        if &found != magic {
            return Err(Error::BadMagic {
                expected: *magic,
                found,
            });
        }
        Ok(Reader { bytes, pos: 4 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::TruncatedFile {
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    /// Fail early if fewer than `n` bytes remain, reporting the full size
    /// the header implies.
    pub fn expect_remaining(&self, n: usize) -> Result<()> {
        let expected = self.pos + n;
        if expected > self.bytes.len() {
            return Err(Error::TruncatedFile {
                expected,
                found: self.bytes.len(),
            });
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    pub fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        self.expect_remaining(n * 4)?;
        (0..n).map(|_| self.f32()).collect()
    }

    pub fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        self.expect_remaining(n * 8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::MetaMismatch(format!(
                "{} trailing bytes after payload",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// `dir/name.bin` → `dir/name.meta.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
