//! The `CDT1` binary tensor format: magic `CDT1`, `u32` rank, `u32` dims,
//! then row-major little-endian `f32` values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CDT1";

pub fn encode(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn take_u32(bytes: &[u8], at: &mut usize) -> Result<u32> {
    let chunk = bytes
        .get(*at..*at + 4)
        .ok_or_else(|| Error::Format("truncated CDT1 header".into()))?;
    *at += 4;
    Ok(u32::from_le_bytes(chunk.try_into().expect("4 bytes")))
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing CDT1 magic".into()));
    }
    let mut at = 4;
    let rank = take_u32(bytes, &mut at)? as usize;
    let dims = (0..rank)
        .map(|_| take_u32(bytes, &mut at).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let numel: usize = dims.iter().product();
    let body = &bytes[at..];
    if body.len() != numel * 4 {
        return Err(Error::Format(format!(
            "CDT1 body has {} bytes, dims {dims:?} need {}",
            body.len(),
            numel * 4
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(dims, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
