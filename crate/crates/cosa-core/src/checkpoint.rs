//! Checkpoint container: magic `CSA1`, a manifest of parameter names and
//! shapes, then raw little-endian f32 payloads in manifest order.

use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::{CosaError, Result};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"CSA1";

/// Write named tensors as one checkpoint file.
pub fn write_bundle(path: &Path, entries: &[(String, &Tensor<f32>)]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| CosaError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io = |e| CosaError::io(path.display().to_string(), e);

    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(entries.len() as u64).to_le_bytes()).map_err(io)?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(bytes).map_err(io)?;
        w.write_all(&[tensor.rank() as u8]).map_err(io)?;
        for &dim in tensor.shape() {
            w.write_all(&(dim as u64).to_le_bytes()).map_err(io)?;
        }
    }
    for (_, tensor) in entries {
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Read a checkpoint back as `(name, tensor)` pairs in manifest order.
pub fn read_bundle(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let file = std::fs::File::open(path).map_err(|e| CosaError::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let io = |e| CosaError::io(path.display().to_string(), e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(CosaError::Format(format!(
            "{}: bad magic {:?}, expected CSA1",
            path.display(),
            magic
        )));
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf).map_err(io)?;
    let count = u64::from_le_bytes(u64buf) as usize;

    let mut manifest: Vec<(String, Vec<usize>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(io)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name)
            .map_err(|_| CosaError::Format(format!("{}: non-utf8 name", path.display())))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank).map_err(io)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            r.read_exact(&mut u64buf).map_err(io)?;
            shape.push(u64::from_le_bytes(u64buf) as usize);
        }
        manifest.push((name, shape));
    }

    let mut out = Vec::with_capacity(count);
    for (name, shape) in manifest {
        let len: usize = shape.iter().product();
        let mut raw = vec![0u8; len * 4];
        r.read_exact(&mut raw).map_err(|e| {
            CosaError::Format(format!(
                "{}: truncated payload for {name} (expected {} bytes): {e}",
                path.display(),
                len * 4
            ))
        })?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Save stores with parameter names namespaced as `store/param`.
pub fn save_stores(path: &Path, stores: &[&ParamStore<f32>]) -> Result<()> {
    let mut entries = Vec::new();
    for store in stores {
        for (name, value) in store.iter_values() {
            entries.push((format!("{}/{}", store.name(), name), value));
        }
    }
    write_bundle(path, &entries)
}

/// Restore previously saved stores in place.
///
/// Every parameter of every store must be present with a matching
/// shape; the first mismatch is named in the error.
pub fn load_stores(path: &Path, stores: &mut [&mut ParamStore<f32>]) -> Result<()> {
    let loaded = read_bundle(path)?;
    let by_name: std::collections::HashMap<&str, &Tensor<f32>> =
        loaded.iter().map(|(n, t)| (n.as_str(), t)).collect();
    for store in stores.iter_mut() {
        let param_names: Vec<String> = store.names().map(String::from).collect();
        for pname in param_names {
            let key = format!("{}/{}", store.name(), pname);
            let tensor = by_name.get(key.as_str()).ok_or_else(|| {
                CosaError::Format(format!(
                    "{}: checkpoint is missing parameter {key}",
                    path.display()
                ))
            })?;
            if tensor.shape() != store.value(&pname).shape() {
                return Err(CosaError::Format(format!(
                    "{}: parameter {key} has shape {:?}, store expects {:?}",
                    path.display(),
                    tensor.shape(),
                    store.value(&pname).shape()
                )));
            }
            store.set_value(&pname, (*tensor).clone());
        }
    }
    Ok(())
}
