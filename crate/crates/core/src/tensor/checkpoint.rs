//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes   "SGNASCK1"
//! count   u32       number of entries
//! entry*  name_len u32 | name utf-8 | dtype u8 (0 = f32, 1 = f64)
//!         | ndim u32 | dims u64 * ndim | values (f32/f64 LE) * prod(dims)
//! ```

use std::fs;
use std::path::Path;

use super::{DType, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SGNASCK1";

pub type Checkpoint<T> = Vec<(String, Tensor<T>)>;

pub fn write_checkpoint<T: Scalar>(path: &Path, entries: &[(&str, &Tensor<T>)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(match T::DTYPE {
            DType::Single => 0,
            DType::Double => 1,
        });
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.to_le_bytes(&mut buf);
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                msg: "truncated checkpoint".into(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Reads every entry, converting values to `T` when the stored dtype differs.
pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(8)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| bad("non-utf8 name"))?;
        let dtype = r.take(1)?[0];
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data: Vec<T> = match dtype {
            0 => r
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|c| T::of(f32::from_le_slice(c) as f64))
                .collect(),
            1 => r
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|c| T::of(f64::from_le_slice(c)))
                .collect(),
            _ => return Err(bad("unknown dtype tag")),
        };
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}

/// Writes every parameter and buffer of `store`.
pub fn save_checkpoint<T: Scalar>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    write_checkpoint(path, &store.named_tensors())
}

/// Restores `store` from a checkpoint. Every entry of the store must be
/// present in the file and vice versa.
pub fn load_checkpoint<T: Scalar>(path: &Path, store: &mut ParamStore<T>) -> Result<()> {
    let entries = read_checkpoint::<T>(path)?;
    let expected = store.named_tensors().len();
    if entries.len() != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("{} entries, network has {expected}", entries.len()),
        });
    }
    for (name, t) in &entries {
        store.assign(name, t)?;
    }
    Ok(())
}
