//! Binary checkpoint format for a [`ParamStore`].
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic     b"IDEPARAM"
//! version   u32            (currently 1)
//! seed      u64
//! iteration u64            training iterations already applied
//! count     u32
//! count x { name_len u32, name utf-8, kind u8 (0 scalar, 1 vector, 2 matrix),
//!           rows u32, cols u32, values f64 x len }
//! ```

use std::fs;
use std::path::Path;

use crate::autodiff::{ParamStore, Shape, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"IDEPARAM";
pub const FORMAT_VERSION: u32 = 1;

/// Parameters together with the iteration they were saved at.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub iteration: u64,
}

pub fn encode(params: &ParamStore, iteration: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + params.total_len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&params.seed().to_le_bytes());
    out.extend_from_slice(&iteration.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let (kind, rows, cols) = match t.shape() {
            Shape::Scalar => (0u8, 1u32, 1u32),
            Shape::Vector(n) => (1, n as u32, 1),
            Shape::Matrix(r, c) => (2, r as u32, c as u32),
        };
        out.push(kind);
        out.extend_from_slice(&rows.to_le_bytes());
        out.extend_from_slice(&cols.to_le_bytes());
        for v in t.data() {
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
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let seed = r.u64()?;
    let iteration = r.u64()?;
    let count = r.u32()?;
    let mut params = ParamStore::new(seed);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| format!("parameter name: {e}"))?
            .to_owned();
        let kind = r.u8()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let shape = match kind {
            0 => Shape::Scalar,
            1 => Shape::Vector(rows),
            2 => Shape::Matrix(rows, cols),
            k => return Err(format!("unknown shape tag {k}")),
        };
        let data = (0..shape.len())
            .map(|_| r.f64())
            .collect::<Result<Vec<_>, _>>()?;
        let tensor = Tensor::from_shape(shape, data).map_err(|e| e.to_string())?;
        params.insert(name, tensor).map_err(|e| e.to_string())?;
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(Checkpoint { params, iteration })
}

pub fn save(path: &Path, params: &ParamStore, iteration: u64) -> Result<()> {
    fs::write(path, encode(params, iteration))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|reason| Error::Format {
        path: path.to_path_buf(),
        reason,
    })
}
