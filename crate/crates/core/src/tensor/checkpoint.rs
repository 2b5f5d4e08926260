//! Binary parameter checkpoint: magic string, format version, then named
//! entries (UTF-8 name, shape, little-endian f32 data), sorted by name.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"FVTNSR\0\0";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(w: &mut W, params: &ParamStore) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, tensor) in params.iter() {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<ParamStore> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::BadCheckpoint("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::BadCheckpoint("bad magic string".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::BadCheckpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let count = read_u32(r)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)
            .map_err(|_| Error::BadCheckpoint("truncated name".into()))?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::BadCheckpoint("name is not UTF-8".into()))?;
        let ndims = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(read_u32(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f32; numel];
        let mut buf = [0u8; 4];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)
                .map_err(|_| Error::BadCheckpoint(format!("truncated data for `{name}`")))?;
            *v = f32::from_le_bytes(buf);
        }
        store.insert(&name, Tensor::new(shape, data)?)?;
    }
    Ok(store)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::BadCheckpoint("truncated header".into()))?;
    Ok(u32::from_le_bytes(buf))
}
