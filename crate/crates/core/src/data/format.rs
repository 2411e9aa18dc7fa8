//! W4CT tensor files: magic "W4CT", version u8 = 1, dtype u8 (1 = 32-bit
//! float), ndim u32 LE, dims u32 LE each, then the row-major f32 LE payload.
//! Multiple records may be concatenated in one file; readers consume one
//! record at a time.

use std::path::Path;

use crate::bytes::{push_u32, ByteReader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"W4CT";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;

pub fn encode_into(out: &mut Vec<u8>, x: &Tensor<f32>) {
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    push_u32(out, x.ndim() as u32);
    for &d in x.shape() {
        push_u32(out, d as u32);
    }
    for v in x.to_vec() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn decode_from(r: &mut ByteReader) -> Result<Tensor<f32>> {
    r.magic(&MAGIC, "tensor")?;
    let at = r.pos();
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported tensor version {version} at offset {at}, expected {VERSION}"
        )));
    }
    let at = r.pos();
    let dtype = r.u8("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(Error::format(format!(
            "unsupported dtype {dtype} at offset {at}, only 1 (f32) is defined"
        )));
    }
    let ndim = r.u32("ndim")? as usize;
    if ndim == 0 || ndim > 8 {
        return Err(Error::format(format!("ndim {ndim} out of range 1..=8")));
    }
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        dims.push(r.u32(&format!("dim {i}"))? as usize);
    }
    let n: usize = dims.iter().product();
    let data = r.f32_payload(n, "payload")?;
    Tensor::from_vec(&dims, data)
}

pub fn write_tensor(path: &Path, x: &Tensor<f32>) -> Result<()> {
    let mut out = Vec::new();
    encode_into(&mut out, x);
    Ok(std::fs::write(path, out)?)
}

/// Reads the first (usually only) record of the file.
pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let buf = std::fs::read(path)?;
    decode_from(&mut ByteReader::new(&buf))
}

/// Target ingest rule: NaN marks a missing pixel and becomes value 0 with
/// mask 0; everything else is valid.
pub fn split_nan_targets(x: &Tensor<f32>) -> (Tensor<f32>, Tensor<f32>) {
    let raw = x.to_vec();
    let mut clean = Vec::with_capacity(raw.len());
    let mut mask = Vec::with_capacity(raw.len());
    for v in raw {
        if v.is_nan() {
            clean.push(0.0);
            mask.push(0.0);
        } else {
            clean.push(v);
            mask.push(1.0);
        }
    }
    (
        Tensor::from_vec(x.shape(), clean).unwrap(),
        Tensor::from_vec(x.shape(), mask).unwrap(),
    )
}

pub fn read_targets(path: &Path) -> Result<(Tensor<f32>, Tensor<f32>)> {
    Ok(split_nan_targets(&read_tensor(path)?))
}
