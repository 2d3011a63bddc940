//! `ASPW1` parameter checkpoints.
//!
//! Layout: magic `ASPW1`, `u32` entry count, then per entry a `u16` name
//! length, the UTF-8 name, a `u8` rank, `rank` `u32` extents and the values
//! as `f64`. All integers and floats are little-endian.

use std::io::{Read, Write};

use thiserror::Error;

use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"ASPW1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },
    #[error("checkpoint does not match model: {0}")]
    Mismatch(String),
}

pub fn write_checkpoint<W: Write>(store: &ParamStore, mut out: W) -> Result<(), CheckpointError> {
    out.write_all(MAGIC)?;
    out.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, name, t) in store.iter() {
        let bytes = name.as_bytes();
        let len =
            u16::try_from(bytes.len()).map_err(|_| CheckpointError::Mismatch(format!("name too long: {name}")))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(bytes)?;
        let rank = u8::try_from(t.rank()).map_err(|_| CheckpointError::Mismatch(format!("rank too large: {name}")))?;
        out.write_all(&[rank])?;
        for &e in t.shape() {
            out.write_all(&(e as u32).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N], CheckpointError> {
        let mut buf = [0u8; N];
        self.fill(&mut buf, what)?;
        Ok(buf)
    }

    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<(), CheckpointError> {
        let mut read = 0;
        while read < buf.len() {
            match self.inner.read(&mut buf[read..]) {
                Ok(0) => {
                    return Err(CheckpointError::Format {
                        offset: self.offset + read as u64,
                        detail: format!("truncated while reading {what}"),
                    })
                }
                Ok(n) => read += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }
}

/// Reads every entry of a checkpoint, in file order.
pub fn read_checkpoint<R: Read>(input: R) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut cur = Cursor {
        inner: input,
        offset: 0,
    };
    let magic: [u8; 5] = cur.take("magic")?;
    if &magic != MAGIC {
        return Err(CheckpointError::Format {
            offset: 0,
            detail: format!("bad magic {:?}", String::from_utf8_lossy(&magic)),
        });
    }
    let count = u32::from_le_bytes(cur.take("entry count")?);
    let mut entries = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(cur.take("name length")?) as usize;
        let at = cur.offset;
        let mut name = vec![0u8; name_len];
        cur.fill(&mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Format {
            offset: at,
            detail: "name is not UTF-8".into(),
        })?;
        let [rank] = cur.take::<1>("rank")?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(cur.take("extent")?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(cur.take("value")?));
        }
        entries.push((name, Tensor::new(shape, data).expect("extent product")));
    }
    Ok(entries)
}

/// Overwrites every parameter of `store` from checkpoint entries. Names and
/// shapes must match one to one.
pub fn load_into(store: &mut ParamStore, entries: Vec<(String, Tensor)>) -> Result<(), CheckpointError> {
    if entries.len() != store.len() {
        return Err(CheckpointError::Mismatch(format!(
            "checkpoint has {} tensors, model has {}",
            entries.len(),
            store.len()
        )));
    }
    for (name, t) in entries {
        let id = store
            .id(&name)
            .ok_or_else(|| CheckpointError::Mismatch(format!("unknown parameter {name}")))?;
        let slot = store.get_mut(id);
        if slot.shape() != t.shape() {
            return Err(CheckpointError::Mismatch(format!(
                "{name}: checkpoint shape {:?}, model shape {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(())
}
