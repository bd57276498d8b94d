//! `SPGW` checkpoint files: a magic tag and version, then named `f64` blobs.
//!
//! ```text
//! "SPGW" | u32 version | u32 count
//! count × ( u32 name_len | name (utf-8) | u32 ndims | ndims × u64 dim | numel × f64 )
//! ```
//! All integers and floats are little-endian.

use super::params::ParamStore;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPGW";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_NAME_LEN: usize = 4096;
const MAX_DIMS: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedBlob {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn encode_checkpoint(blobs: &[NamedBlob]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for b in blobs {
        out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
        out.extend_from_slice(b.name.as_bytes());
        out.extend_from_slice(&(b.dims.len() as u32).to_le_bytes());
        for &d in &b.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &b.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<NamedBlob>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not an SPGW checkpoint".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut blobs = Vec::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        if name_len > MAX_NAME_LEN {
            return Err(Error::Format(format!("parameter name of {name_len} bytes")));
        }
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("parameter name is not utf-8".into()))?
            .to_string();
        let ndims = r.u32()? as usize;
        if ndims > MAX_DIMS {
            return Err(Error::Format(format!("`{name}` has {ndims} dimensions")));
        }
        let mut dims = Vec::with_capacity(ndims);
        let mut numel: usize = 1;
        for _ in 0..ndims {
            let d = usize::try_from(r.u64()?)
                .map_err(|_| Error::Format(format!("`{name}` dimension too large")))?;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::Format(format!("`{name}` element count overflows")))?;
            dims.push(d);
        }
        if numel.checked_mul(8).is_none_or(|b| b > r.remaining()) {
            return Err(Error::Format(format!("`{name}` data truncated")));
        }
        let data = r
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        blobs.push(NamedBlob { name, dims, data });
    }
    if r.remaining() != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(blobs)
}

impl ParamStore {
    pub fn to_blobs(&self) -> Vec<NamedBlob> {
        self.iter()
            .map(|p| NamedBlob {
                name: p.name.clone(),
                dims: p.dims.clone(),
                data: p.value.clone(),
            })
            .collect()
    }

    /// Copy values from `blobs` into same-named parameters. Every parameter
    /// must be present with an identical shape.
    pub fn load_blobs(&mut self, blobs: &[NamedBlob]) -> Result<()> {
        for p in self.iter_mut() {
            let blob = blobs
                .iter()
                .find(|b| b.name == p.name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter `{}`", p.name)))?;
            if blob.dims != p.dims {
                return Err(Error::ShapeMismatch {
                    what: format!("parameter `{}` (network vs checkpoint)", p.name),
                    expected: p.dims.clone(),
                    got: blob.dims.clone(),
                });
            }
            p.value.copy_from_slice(&blob.data);
        }
        Ok(())
    }
}
