//! Weight checkpoint file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes  "ASDCKPT\0"
//! version          u32
//! metadata_len     u32, then metadata_len bytes of UTF-8 (free-form, e.g. model config)
//! param_count      u32
//! per parameter:   name_len u32, name bytes, ndim u32, ndim x u64 extents
//! payload          every parameter's values as f64 LE, in table order
//! ```

use std::io::{Read, Write};

use super::{ParamStore, Tensor};
use crate::error::{AsdError, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ASDCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub metadata: String,
    pub params: ParamStore<T>,
}

pub fn write_checkpoint<T: Scalar, W: Write>(mut w: W, ckpt: &Checkpoint<T>) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    write_u32(&mut w, ckpt.metadata.len())?;
    w.write_all(ckpt.metadata.as_bytes())?;
    write_u32(&mut w, ckpt.params.len())?;
    for (name, t) in ckpt.params.iter() {
        write_u32(&mut w, name.len())?;
        w.write_all(name.as_bytes())?;
        write_u32(&mut w, t.shape().len())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
    }
    for (_, t) in ckpt.params.iter() {
        for x in t.data() {
            w.write_all(&x.as_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<Checkpoint<T>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(AsdError::format("not a checkpoint (bad magic)"));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(AsdError::format(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = read_u32(&mut r)? as usize;
    let metadata = String::from_utf8(read_bytes(&mut r, meta_len)?)
        .map_err(|_| AsdError::format("metadata is not UTF-8"))?;
    let count = read_u32(&mut r)? as usize;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let name = String::from_utf8(read_bytes(&mut r, name_len)?)
            .map_err(|_| AsdError::format("parameter name is not UTF-8"))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        table.push((name, shape));
    }
    let mut params = ParamStore::new();
    for (name, shape) in table {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            data.push(T::of(f64::from_le_bytes(b)));
        }
        params.insert(name, Tensor::from_vec(&shape, data)?)?;
    }
    Ok(Checkpoint { metadata, params })
}

fn write_u32<W: Write>(w: &mut W, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| AsdError::input("field too large for checkpoint"))?;
    w.write_all(&n.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    if n > 1 << 28 {
        return Err(AsdError::format("implausible field length"));
    }
    let mut v = vec![0u8; n];
    r.read_exact(&mut v)?;
    Ok(v)
}
