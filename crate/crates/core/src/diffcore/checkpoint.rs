//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian `u64`):
//!
//! ```text
//! "SPSEG1" | count | { name_len | name bytes | rank | extents[rank] | f32 values[numel] } * count
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::ParamSet;
use super::tensor::{numel, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"SPSEG1";

const MAX_RANK: u64 = 8;

pub fn write_tensors<'a, W, T, I>(mut w: W, tensors: I) -> Result<()>
where
    W: Write,
    T: Real,
    I: IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
{
    let tensors: Vec<_> = tensors.into_iter().collect();
    w.write_all(MAGIC)?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: usize,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|_| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.offset))
        })?;
        self.offset += n;
        Ok(buf)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.bytes(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn read_tensors<R: Read>(r: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut cur = Cursor { inner: r, offset: 0 };
    let magic = cur.bytes(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {:?}", String::from_utf8_lossy(&magic))));
    }
    let count = cur.u64("tensor count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let name_len = cur.u64("name length")?;
        if name_len > 4096 {
            return Err(Error::Checkpoint(format!("implausible name length {name_len}")));
        }
        let name = String::from_utf8(cur.bytes(name_len as usize, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = cur.u64("rank")?;
        if rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("tensor `{name}` has rank {rank}")));
        }
        let shape = (0..rank).map(|_| cur.u64("extent").map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n = numel(&shape);
        let raw = cur.bytes(n * 4, "values")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    let mut rest = Vec::new();
    cur.inner.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok(out)
}

pub fn save_params<T: Real>(path: &Path, params: &ParamSet<T>) -> Result<()> {
    let f = BufWriter::new(File::create(path)?);
    write_tensors(f, params.iter())
}

/// Loads every record as a trainable parameter.
pub fn load_params<T: Real>(path: &Path) -> Result<ParamSet<T>> {
    let f = BufReader::new(File::open(path)?);
    let mut params = ParamSet::new();
    for (name, t) in read_tensors(f)? {
        params.insert(name, t.cast::<T>());
    }
    Ok(params)
}
