//! `UDCT` binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "UDCT" | version: u32 | ndim: u32 | dims: ndim × u32 | payload: numel × f64
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"UDCT";
pub const VERSION: u32 = 1;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.ndim() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + 4 * t.ndim() + 8 * t.len());
    write_tensor(&mut buf, t).expect("writing to a Vec cannot fail");
    buf
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    let end = *pos + 4;
    let chunk = bytes
        .get(*pos..end)
        .ok_or_else(|| Error::parse("UDCT", "truncated header"))?;
    *pos = end;
    Ok(u32::from_le_bytes(chunk.try_into().unwrap()))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::parse("UDCT", "bad magic"));
    }
    let mut pos = 4;
    let version = read_u32(bytes, &mut pos)?;
    if version != VERSION {
        return Err(Error::parse("UDCT", format!("unsupported version {version}")));
    }
    let ndim = read_u32(bytes, &mut pos)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u32(bytes, &mut pos)? as usize);
    }
    let numel: usize = shape.iter().product();
    let payload = &bytes[pos..];
    if payload.len() != numel * 8 {
        return Err(Error::parse(
            "UDCT",
            format!("expected {} payload bytes, found {}", numel * 8, payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(&shape, data)
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)
        .map_err(|e| Error::parse("UDCT", e.to_string()))?;
    from_bytes(&buf)
}

pub fn save(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, to_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
        other => other,
    })
}
