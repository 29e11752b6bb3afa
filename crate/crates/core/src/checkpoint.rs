//! The DMCK checkpoint format.
//!
//! Little-endian: magic `DMCK`, format version (u32), parameter count
//! (u32), then for each parameter its name length (u32), UTF-8 name, rank
//! (u32), extents (u64 each) and `f64` values in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Parameters;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DMCK";
pub const VERSION: u32 = 1;

pub fn encode<P: Parameters + ?Sized>(params: &P) -> Vec<u8> {
    let mut entries: Vec<(String, &Tensor)> = Vec::new();
    params.visit("", &mut |name, t| entries.push((name, t)));
    let mut out = Vec::with_capacity(12 + params.param_count() * 8 + entries.len() * 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// A decoded checkpoint entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub tensor: Tensor,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end =
            end.ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic (not a DMCK file)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let count = r.u32("parameter count")? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32(&name)? as usize;
        let shape = (0..rank)
            .map(|_| r.u64(&name).map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let numel = numel.ok_or_else(|| Error::Checkpoint(format!("{name}: extents overflow")))?;
        let raw = r.take(numel.saturating_mul(8), &name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        entries.push(Entry {
            name,
            tensor: Tensor::new(shape, data)?,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(entries)
}

/// Overwrites every parameter of `params` from the decoded entries. Names
/// and shapes must match exactly.
pub fn load_into<P: Parameters + ?Sized>(params: &mut P, entries: Vec<Entry>) -> Result<()> {
    let mut expected = Vec::new();
    params.visit("", &mut |name, t| expected.push((name, t.shape().to_vec())));
    for (name, _) in &expected {
        if !entries.iter().any(|e| &e.name == name) {
            return Err(Error::Checkpoint(format!("missing parameter {name}")));
        }
    }
    if let Some(extra) = entries
        .iter()
        .find(|e| !expected.iter().any(|(n, _)| n == &e.name))
    {
        return Err(Error::Checkpoint(format!(
            "unexpected parameter {}",
            extra.name
        )));
    }
    for (name, shape) in &expected {
        let e = entries
            .iter()
            .find(|e| &e.name == name)
            .expect("checked above");
        if e.tensor.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name}: checkpoint {:?}, model {shape:?}",
                e.tensor.shape()
            )));
        }
    }
    let mut entries = entries;
    params.visit_mut("", &mut |name, t| {
        let i = entries
            .iter()
            .position(|e| e.name == name)
            .expect("checked above");
        let data = std::mem::replace(&mut entries[i].tensor, Tensor::scalar(0.0)).into_data();
        t.data_mut().copy_from_slice(&data);
    });
    Ok(())
}

pub fn save<P: Parameters + ?Sized>(params: &P, path: &Path) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load<P: Parameters + ?Sized>(params: &mut P, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    load_into(params, decode(&bytes)?)
}
