//! Checkpoint file format.
//!
//! Layout (all integers little-endian):
//!   magic        4 bytes  "GSNC"
//!   version      u32      currently 1
//!   tensor count u64
//!   per tensor:
//!     name length u32, UTF-8 name bytes
//!     rank        u32
//!     extents     rank x u64
//!     payload     product(extents) x f64 (little-endian bits)
//!
//! Round trips are byte-exact: floats are stored via their raw bit pattern.

use std::path::Path;

use crate::error::{GsError, Result};
use crate::pgm::write_atomic;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"GSNC";
const VERSION: u32 = 1;

pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data().iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn bad(&self, msg: impl std::fmt::Display) -> GsError {
        GsError::Checkpoint(format!("{}: {msg}", self.path.display()))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.bad(format!("truncated at byte {}", self.pos)));
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
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| GsError::io(path, e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if cur.take(4)? != MAGIC {
        return Err(cur.bad("bad magic, not a GSNC checkpoint"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(cur.bad(format!("unsupported version {version}")));
    }
    let count = cur.u64()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| cur.bad("tensor name is not UTF-8"))?
            .to_string();
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = cur.take(numel * 8)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::from_vec(data, &shape)?));
    }
    if cur.pos != bytes.len() {
        return Err(cur.bad(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(out)
}

/// Copy loaded values into a model's named parameters, requiring an exact
/// name/shape match in both directions.
pub fn restore_into(loaded: &[(String, Tensor)], params: &[(String, Tensor)]) -> Result<()> {
    if loaded.len() != params.len() {
        return Err(GsError::Checkpoint(format!(
            "checkpoint has {} tensors, model has {} parameters",
            loaded.len(),
            params.len()
        )));
    }
    let by_name: std::collections::HashMap<&str, &Tensor> =
        loaded.iter().map(|(n, t)| (n.as_str(), t)).collect();
    for (name, p) in params {
        let t = by_name.get(name.as_str()).ok_or_else(|| {
            GsError::Checkpoint(format!("model parameter `{name}` missing from checkpoint"))
        })?;
        if t.shape() != p.shape() {
            return Err(GsError::Checkpoint(format!(
                "parameter `{name}`: checkpoint shape {:?} vs model shape {:?}",
                t.shape(),
                p.shape()
            )));
        }
        p.set_data(&t.data());
    }
    Ok(())
}
