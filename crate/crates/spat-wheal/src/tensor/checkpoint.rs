//! Versioned binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   5 bytes  "SPATW"
//! version u32
//! then per-parameter records until EOF:
//!   name_len u64, name (UTF-8),
//!   rank u64, dims rank x u64,
//!   data prod(dims) x f32 (raw bits)
//! ```
//!
//! Values round-trip bit-exactly: floats are written and read as their raw
//! bit patterns.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"SPATW";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(
    path: &Path,
    params: &[(String, Tensor<f32>)],
) -> Result<(), TensorError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (name, tensor) in params {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.shape().len() as u64).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads all parameter records as `(name, dims, values)`.
pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>, TensorError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| TensorError::Checkpoint("file too short for magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TensorError::Checkpoint(format!(
            "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut params = Vec::new();
    loop {
        let name_len = match read_u64_opt(&mut r)? {
            Some(n) => n as usize,
            None => break, // clean EOF between records
        };
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|e| TensorError::Checkpoint(format!("invalid parameter name: {e}")))?;
        let rank = read_u64(&mut r)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u64(&mut r)? as usize);
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f32::from_bits(u32::from_le_bytes(buf)));
        }
        params.push((name, dims, data));
    }
    Ok(params)
}

fn read_u32(r: &mut impl Read) -> Result<u32, TensorError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64, TensorError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Reads a u64 or reports clean EOF (no bytes at all) as `None`.
fn read_u64_opt(r: &mut impl Read) -> Result<Option<u64>, TensorError> {
    let mut buf = [0u8; 8];
    let mut got = 0;
    while got < 8 {
        let n = r.read(&mut buf[got..])?;
        if n == 0 {
            if got == 0 {
                return Ok(None);
            }
            return Err(TensorError::Checkpoint(
                "truncated record header".into(),
            ));
        }
        got += n;
    }
    Ok(Some(u64::from_le_bytes(buf)))
}
