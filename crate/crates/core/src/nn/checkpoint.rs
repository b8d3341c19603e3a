//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"S3CKPT\0\0"
//! u32    format version
//! u32    metadata length, then UTF-8 JSON metadata
//! u32    group count
//!   per group:  u32 name length, name, u32 tensor count
//!     per tensor: u32 name length, name, u32 rank, u64 dims[rank], f32 values
//! ```

use std::fs;
use std::path::Path;

use serde_json::Value;

use super::params::ParamSet;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"S3CKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: Value,
    pub groups: Vec<(String, ParamSet<f32>)>,
}

impl Checkpoint {
    pub fn new(metadata: Value) -> Self {
        Self {
            metadata,
            groups: Vec::new(),
        }
    }

    pub fn with_group(mut self, name: &str, params: ParamSet<f32>) -> Self {
        self.groups.push((name.to_string(), params));
        self
    }

    pub fn group(&self, name: &str) -> Option<&ParamSet<f32>> {
        self.groups.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.metadata).expect("json metadata serialises");
        put_bytes(&mut out, &meta);
        out.extend_from_slice(&(self.groups.len() as u32).to_le_bytes());
        for (name, set) in &self.groups {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(set.len() as u32).to_le_bytes());
            for (tname, t) in set.iter() {
                put_bytes(&mut out, tname.as_bytes());
                out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
                for &d in t.dims() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for &v in t.data() {
                    v.write_le(&mut out);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let meta_len = r.u32()? as usize;
        let metadata: Value = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let ngroups = r.u32()?;
        let mut groups = Vec::new();
        for _ in 0..ngroups {
            let name = r.string()?;
            let ntensors = r.u32()?;
            let mut entries = Vec::new();
            for _ in 0..ntensors {
                let tname = r.string()?;
                let rank = r.u32()? as usize;
                let mut dims = Vec::with_capacity(rank);
                for _ in 0..rank {
                    dims.push(r.u64()? as usize);
                }
                let n: usize = dims.iter().product();
                let raw = r.take(n * f32::BYTES)?;
                let data = raw.chunks_exact(4).map(f32::read_le).collect();
                entries.push((tname, Tensor::from_vec(&dims, data)));
            }
            groups.push((name, ParamSet::from_entries(entries)));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint payload".into()));
        }
        Ok(Self { metadata, groups })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated checkpoint".into()));
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

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("non-UTF-8 name".into()))
    }
}
