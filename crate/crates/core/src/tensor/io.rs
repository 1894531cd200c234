//! Flat binary tensor format: `"CPLT"`, a `u8` rank, `rank` little-endian
//! `u64` extents, then the `f64` elements in little-endian row-major order.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CPLT";

pub fn write_tensor<W: Write>(out: &mut W, tensor: &Tensor) -> Result<()> {
    let rank = u8::try_from(tensor.rank())
        .map_err(|_| Error::Format(format!("rank {} does not fit in a u8", tensor.rank())))?;
    out.write_all(MAGIC)?;
    out.write_all(&[rank])?;
    for &extent in tensor.shape() {
        out.write_all(&(extent as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(tensor.numel() * 8);
    for v in tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

fn read_exact_or_truncated<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated tensor {what}")),
        _ => Error::Io(e),
    })
}

pub fn read_tensor<R: Read>(input: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(input, &mut magic, "header")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let mut rank = [0u8; 1];
    read_exact_or_truncated(input, &mut rank, "header")?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        let mut ext = [0u8; 8];
        read_exact_or_truncated(input, &mut ext, "header")?;
        let extent = usize::try_from(u64::from_le_bytes(ext))
            .map_err(|_| Error::Format("extent overflows usize".into()))?;
        shape.push(extent);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Format(format!("element count overflow for {shape:?}")))?;
    let mut bytes = vec![0u8; numel * 8];
    read_exact_or_truncated(input, &mut bytes, "data")?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}
