//! Checkpoint serialization.
//!
//! Little-endian binary layout:
//!
//! ```text
//! magic "MAFA1"
//! u32 parameter count
//! per parameter: u32 name length, UTF-8 name, 4 x u32 dims, f32 values
//! u64 adam step counter
//! u32 first-moment count,  same per-tensor records
//! u32 second-moment count, same per-tensor records
//! ```
//!
//! Round-trips are byte-exact: values are stored as f32, and loading widens
//! them back to the in-memory f64 without further change.

use crate::error::{Error, Result};
use crate::optim::{AdamState, ParamSet};
use crate::tensor::Tensor4;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 5] = b"MAFA1";

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor4) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    for d in t.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &t.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn to_bytes(params: &ParamSet, state: &AdamState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        write_tensor(&mut out, name, t);
    }
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&(state.m.len() as u32).to_le_bytes());
    for (name, t) in &state.m {
        write_tensor(&mut out, name, t);
    }
    out.extend_from_slice(&(state.v.len() as u32).to_le_bytes());
    for (name, t) in &state.v {
        write_tensor(&mut out, name, t);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor4)> {
        let name_len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| Error::Checkpoint("invalid parameter name".into()))?
            .to_string();
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = self.u32()? as usize;
        }
        let count: usize = dims.iter().product();
        let raw = self.take(count * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Ok((name, Tensor4 { dims, data }))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ParamSet, AdamState)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(5)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
    }
    let n = r.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..n {
        let (name, t) = r.tensor()?;
        params.insert(name, t)?;
    }
    let step = r.u64()?;
    let nm = r.u32()? as usize;
    let mut m = Vec::with_capacity(nm);
    for _ in 0..nm {
        m.push(r.tensor()?);
    }
    let nv = r.u32()? as usize;
    let mut v = Vec::with_capacity(nv);
    for _ in 0..nv {
        v.push(r.tensor()?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
    }
    Ok((params, AdamState { step, m, v }))
}

pub fn save(path: &Path, params: &ParamSet, state: &AdamState) -> Result<()> {
    let bytes = to_bytes(params, state);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamSet, AdamState)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}
