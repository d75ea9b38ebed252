//! Tensor pack files: magic `CSAT`, u8 rank, u64 little-endian dims,
//! then the row-major little-endian f32 payload.

use crate::tensor::Tensor;
use crate::{CosaError, Result};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"CSAT";

pub fn write_pack(path: &Path, tensor: &Tensor<f32>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| CosaError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io = |e| CosaError::io(path.display().to_string(), e);

    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&[tensor.rank() as u8]).map_err(io)?;
    for &d in tensor.shape() {
        w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
    }
    let mut buf = Vec::with_capacity(tensor.len() * 4);
    for &v in tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(io)?;
    w.flush().map_err(io)
}

pub fn read_pack(path: &Path) -> Result<Tensor<f32>> {
    let file = std::fs::File::open(path).map_err(|e| CosaError::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let io = |e| CosaError::io(path.display().to_string(), e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(CosaError::Format(format!(
            "{}: bad magic {:?}, expected CSAT",
            path.display(),
            magic
        )));
    }
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank).map_err(io)?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    let mut dim = [0u8; 8];
    for _ in 0..rank[0] {
        r.read_exact(&mut dim).map_err(io)?;
        shape.push(u64::from_le_bytes(dim) as usize);
    }
    let len: usize = shape.iter().product();
    let mut raw = vec![0u8; len * 4];
    r.read_exact(&mut raw).map_err(|e| {
        CosaError::Format(format!(
            "{}: truncated payload, expected {} bytes of f32 data: {e}",
            path.display(),
            len * 4
        ))
    })?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}
