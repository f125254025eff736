//! Binary checkpoint container.
//!
//! Layout (all integers little-endian, values IEEE-754 binary64 LE):
//!
//! ```text
//! magic        8 bytes  "GSNCKPT1"
//! header_len   u32      length of the header text in bytes
//! header       UTF-8    "key=value" lines, sorted by key
//! count        u32      number of tensors
//! per tensor:
//!   name_len   u32, name (UTF-8)
//!   ndim       u32, dims (u64 each)
//!   data       f64 × product(dims)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GSNCKPT1";
const MAGIC_FAMILY: &[u8; 7] = b"GSNCKPT";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub header: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.header.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.header.get(key).map(String::as_str)
    }

    /// Parses a header value, failing with the key name when absent or malformed.
    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::invalid(format!("checkpoint header lacks {key:?}")))?;
        raw.parse()
            .map_err(|_| Error::invalid(format!("checkpoint header {key}={raw:?} is malformed")))
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push_params(&mut self, prefix: &str, params: &ParamSet) {
        for (name, t) in params.iter() {
            self.push(format!("{prefix}{name}"), t.clone());
        }
    }

    /// Overwrites every parameter of `params` from tensors named `prefix + name`.
    pub fn load_params(&self, prefix: &str, params: &mut ParamSet) -> Result<()> {
        let names = params.names().to_vec();
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let full = format!("{prefix}{name}");
            let t = self
                .tensor(&full)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor {full:?}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::shape("checkpoint tensor", slot.shape(), t.shape()));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = String::new();
        for (k, v) in &self.header {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::invalid(format!("header entry {k:?} cannot be encoded")));
            }
            header.push_str(&format!("{k}={v}\n"));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            if magic.starts_with(MAGIC_FAMILY) {
                return Err(Error::Version {
                    found: String::from_utf8_lossy(magic).into_owned(),
                    expected: String::from_utf8_lossy(MAGIC).into_owned(),
                });
            }
            return Err(Error::invalid("not a checkpoint (bad magic)"));
        }
        let hlen = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(hlen)?)
            .map_err(|_| Error::invalid("checkpoint header is not UTF-8"))?;
        let mut header = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("bad checkpoint header line {line:?}")))?;
            header.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::invalid("tensor name is not UTF-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::invalid("dimension too large"))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::invalid(format!("tensor {name:?} overruns the file")))?;
            let data = r
                .take(8 * n)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.remaining() != 0 {
            return Err(Error::invalid("trailing bytes after checkpoint"));
        }
        Ok(Checkpoint { header, tensors })
    }

    /// Writes via a temporary file and rename, so readers never see a partial file.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::invalid("checkpoint is truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
