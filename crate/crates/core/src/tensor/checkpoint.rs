//! Named-tensor checkpoints.
//!
//! Layout: the magic `ADDACKPT1\n`, then for each tensor in ascending
//! bytewise name order: `u32` name length, UTF-8 name, `u32` rank, one `u32`
//! per dimension, then the data as `f32`. All integers and floats are
//! little-endian. There is no count field; the stream ends at EOF.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 10] = b"ADDACKPT1\n";

pub fn write_checkpoint<W: Write>(out: &mut W, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let io = |e| Error::io("<checkpoint stream>", e);
    out.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    // BTreeMap<String, _> iterates in bytewise order of the UTF-8 names
    for (name, t) in tensors {
        t.ensure_finite(&format!("checkpoint tensor {name}"))?;
        let mut buf = Vec::with_capacity(16 + name.len() + 4 * t.len());
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf).map_err(io)?;
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                path: self.origin.to_string(),
                msg: format!(
                    "truncated while reading {what}: needed {n} bytes at offset {}, {} available",
                    self.pos,
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_checkpoint<R: Read>(input: &mut R, origin: &str) -> Result<BTreeMap<String, Tensor>> {
    let mut buf = Vec::new();
    input
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(origin, e))?;
    let fmt_err = |msg: String| Error::Format {
        path: origin.to_string(),
        msg,
    };
    if !buf.starts_with(CHECKPOINT_MAGIC) {
        return Err(fmt_err("missing ADDACKPT1 magic".into()));
    }
    let mut cur = Cursor {
        buf: &buf,
        pos: CHECKPOINT_MAGIC.len(),
        origin,
    };
    let mut out = BTreeMap::new();
    while cur.pos < buf.len() {
        let name_len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|e| fmt_err(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let rank = cur.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| cur.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = cur.take(4 * n, &format!("data of {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| fmt_err(format!("{name}: {e}")))?;
        t.ensure_finite(&format!("checkpoint tensor {name}"))?;
        if let Some(prev) = out.keys().next_back() {
            if prev >= &name {
                return Err(fmt_err(format!("tensor {name} out of order after {prev}")));
            }
        }
        out.insert(name, t);
    }
    Ok(out)
}

/// Writes atomically: a temporary sibling file is renamed over `path`.
pub fn save_checkpoint(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, tensors)?;
    crate::util::write_atomic(path, &buf)
}

pub fn load_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let mut f = fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound {
            what: "checkpoint",
            path: path.to_path_buf(),
        },
        _ => Error::io(path, e),
    })?;
    read_checkpoint(&mut f, &path.display().to_string())
}
