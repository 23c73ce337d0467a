//! Binary checkpoint format.
//!
//! ```text
//! "CGV2" | version u32 | count u32 |
//!   per tensor: name_len u32 | name utf-8 | rank u32 | extents u64 × rank | values f32 × n
//! ```
//! All integers and floats are little-endian. Tensors are written in name
//! order so that equal maps produce equal bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"CGV2";
pub const VERSION: u32 = 1;

pub type TensorMap = BTreeMap<String, Tensor>;

pub fn write_to<W: Write>(tensors: &TensorMap, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&u32::try_from(tensors.len()).map_err(|_| too_many())?.to_le_bytes())?;
    for (name, t) in tensors {
        let name = name.as_bytes();
        w.write_all(&u32::try_from(name.len()).map_err(|_| too_many())?.to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn too_many() -> Error {
    Error::Checkpoint("field exceeds 32-bit range".into())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_from<R: Read>(mut r: R) -> Result<TensorMap> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = TensorMap::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = read_u64(&mut r)?;
            shape.push(usize::try_from(d).map_err(|_| Error::Checkpoint("extent overflow".into()))?);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let data: Vec<Scalar> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as Scalar)
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    Ok(out)
}

pub fn to_bytes(tensors: &TensorMap) -> Vec<u8> {
    let mut buf = Vec::new();
    write_to(tensors, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

pub fn save(tensors: &TensorMap, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(tensors))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<TensorMap> {
    let bytes = std::fs::read(path)?;
    read_from(&bytes[..])
}
