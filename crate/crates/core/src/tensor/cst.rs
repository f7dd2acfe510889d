//! The ".cst" tensor container: magic "CST1", u8 rank, rank x u32 LE dims,
//! then the f32 LE row-major payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CST1";

pub fn write_cst(path: &Path, t: &Tensor<f32>) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::dim(format!("cst: rank {} too large", t.rank())));
    }
    let mut buf = Vec::with_capacity(5 + 4 * t.rank() + 4 * t.numel());
    buf.extend_from_slice(MAGIC);
    buf.push(t.rank() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data().iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_cst(path: &Path) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let fail = |msg: &str| Error::data(format!("cst {}: {}", path.display(), msg));
    if bytes.len() < 5 || &bytes[..4] != MAGIC {
        return Err(fail("bad magic"));
    }
    let rank = bytes[4] as usize;
    let mut off = 5;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        if off + 4 > bytes.len() {
            return Err(fail("truncated header"));
        }
        shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
        off += 4;
    }
    let numel: usize = shape.iter().product();
    if bytes.len() != off + 4 * numel {
        return Err(fail("payload length disagrees with dims"));
    }
    let data: Vec<f32> = bytes[off..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(data, &shape)
}
