//! Named-parameter checkpoint files.
//!
//! Layout: magic "PNCK", format version u32, parameter count u32, then per
//! parameter: name length u32 + UTF-8 name, rank u32, dims u32 each, and the
//! values as little-endian 64-bit floats in row-major order. All integers
//! are little-endian.

use super::Tensor;
use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"PNCK";
const VERSION: u32 = 1;

pub fn write_checkpoint(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(entries.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, tensor) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())
            .map_err(io)?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "header")?;
    if &magic != MAGIC {
        return Err(Error::Load {
            entry: "header".into(),
            detail: "bad magic bytes".into(),
        });
    }
    let version = read_u32(&mut r, "header")?;
    if version != VERSION {
        return Err(Error::Load {
            entry: "header".into(),
            detail: format!("unsupported format version {version}"),
        });
    }
    let count = read_u32(&mut r, "header")? as usize;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let label = format!("parameter {i}");
        let name_len = read_u32(&mut r, &label)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes, &label)?;
        let name = String::from_utf8(name_bytes).map_err(|_| Error::Load {
            entry: label.clone(),
            detail: "name is not UTF-8".into(),
        })?;
        let rank = read_u32(&mut r, &name)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, &name)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            read_exact(&mut r, &mut buf, &name)?;
            data.push(f64::from_le_bytes(buf));
        }
        let tensor = Tensor::from_vec(shape, data).map_err(|e| Error::Load {
            entry: name.clone(),
            detail: e.to_string(),
        })?;
        if !tensor.all_finite() {
            return Err(Error::Load {
                entry: name,
                detail: "non-finite value".into(),
            });
        }
        entries.push((name, tensor));
    }
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => Ok(entries),
        Ok(_) => Err(Error::Load {
            entry: "trailer".into(),
            detail: "trailing bytes after last parameter".into(),
        }),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn read_u32(r: &mut impl Read, entry: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, entry)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], entry: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Load {
        entry: entry.to_string(),
        detail: "unexpected end of file".into(),
    })
}
