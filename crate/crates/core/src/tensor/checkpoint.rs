//! Flat parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "OCKP"
//! version      u32      1
//! precision    u8       4 = f32, 8 = f64
//! checksum     32 bytes SHA-256 of the body
//! body_len     u64
//! body:
//!   desc_len   u32, descriptor (UTF-8)
//!   count      u32
//!   per entry: path_len u32, path (UTF-8), rank u32, dims u64 x rank,
//!              payload: numel scalars of `precision` bytes each
//! ```

use std::fs;
use std::path::Path;

use super::{Precision, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::util::sha256;

const MAGIC: &[u8; 4] = b"OCKP";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 1 + 32 + 8;

/// Named tensors plus a descriptor string identifying what they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub descriptor: String,
    pub entries: Vec<(String, Tensor<T>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::corrupt(self.path, "unexpected end of data"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::corrupt(self.path, "invalid UTF-8"))
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(descriptor: impl Into<String>) -> Self {
        Self { descriptor: descriptor.into(), entries: Vec::new() }
    }

    pub fn push(&mut self, path: impl Into<String>, tensor: Tensor<T>) {
        self.entries.push((path.into(), tensor));
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(p, _)| p == path).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();
        body.extend_from_slice(&(self.descriptor.len() as u32).to_le_bytes());
        body.extend_from_slice(self.descriptor.as_bytes());
        body.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (path, tensor) in &self.entries {
            body.extend_from_slice(&(path.len() as u32).to_le_bytes());
            body.extend_from_slice(path.as_bytes());
            body.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &d in tensor.shape() {
                body.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in tensor.data() {
                v.write_le(&mut body);
            }
        }
        let mut out = Vec::with_capacity(HEADER_LEN + body.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(T::PRECISION.tag());
        out.extend_from_slice(&sha256(&body));
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(&body);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::corrupt(path, "bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedFormat(format!("checkpoint version {version}")));
        }
        let tag = r.take(1)?[0];
        let precision = Precision::from_tag(tag).ok_or_else(|| Error::corrupt(path, format!("precision tag {tag}")))?;
        if precision != T::PRECISION {
            return Err(Error::UnsupportedFormat(format!(
                "checkpoint holds {precision:?}, requested {:?}",
                T::PRECISION
            )));
        }
        let checksum: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let body_len = r.u64()? as usize;
        let body = r.take(body_len)?;
        if r.pos != bytes.len() {
            return Err(Error::corrupt(path, "trailing bytes"));
        }
        if sha256(body) != checksum {
            return Err(Error::corrupt(path, "checksum mismatch"));
        }

        let mut r = Reader { bytes: body, pos: 0, path };
        let descriptor = r.string()?;
        let count = r.u32()? as usize;
        let width = precision.bytes();
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let payload = r.take(numel * width)?;
            let data = payload.chunks_exact(width).map(T::read_le).collect();
            let tensor = Tensor::new(shape, data).map_err(|e| Error::corrupt(path, e.to_string()))?;
            entries.push((name, tensor));
        }
        Ok(Self { descriptor, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}
