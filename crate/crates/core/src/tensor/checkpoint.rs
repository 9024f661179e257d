//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `LPRW`, `u32` tensor count, then per tensor
//! a `u32` name length, the UTF-8 name bytes, a `u32` rank, `rank` `u32`
//! dimensions and the `f32` data in row-major order.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LPRW";

pub fn write_tensors<W: Write>(mut out: W, tensors: &[(&str, &Tensor<f32>)]) -> Result<()> {
    out.write_all(MAGIC)?;
    write_u32(&mut out, tensors.len())?;
    for (name, t) in tensors {
        write_u32(&mut out, name.len())?;
        out.write_all(name.as_bytes())?;
        write_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            write_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_tensors<R: Read>(mut input: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let count = read_u32(&mut input)?;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = read_u32(&mut input)?;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?;
        let rank = read_u32(&mut input)?;
        let shape = (0..rank)
            .map(|_| read_u32(&mut input))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        input.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    Ok(tensors)
}

pub(crate) fn write_u32<W: Write>(out: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::format("binary file", "value exceeds u32"))?;
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u32<R: Read>(input: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}
