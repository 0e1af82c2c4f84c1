//! Raw tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "DDTR"
//! version  u16      1
//! rank     u16
//! dtype    u16      bit width of the payload floats: 32 or 64
//! extents  u64 × rank
//! payload  f32 or f64 × product(extents), row-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::{Result, Scalar, Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"DDTR";
pub const VERSION: u16 = 1;

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 8 * t.rank() + t.numel() * (T::BITS as usize / 8));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u16).to_le_bytes());
    out.extend_from_slice(&T::BITS.to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Decodes a tensor file into precision `T`, converting when the stored
/// width differs.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut r = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if r.len() < n {
            return Err(TensorError::Format("truncated".into()));
        }
        let (head, tail) = r.split_at(n);
        r = tail;
        Ok(head)
    };
    if take(4)? != MAGIC {
        return Err(TensorError::Format("bad magic".into()));
    }
    let u16_at = |b: &[u8]| u16::from_le_bytes([b[0], b[1]]);
    let version = u16_at(take(2)?);
    if version != VERSION {
        return Err(TensorError::Format(format!("unsupported version {version}")));
    }
    let rank = u16_at(take(2)?) as usize;
    let bits = u16_at(take(2)?);
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        b.copy_from_slice(take(8)?);
        shape.push(usize::try_from(u64::from_le_bytes(b)).map_err(|_| TensorError::Format("extent overflow".into()))?);
    }
    let n: usize = shape.iter().product();
    let data: Vec<T> = match bits {
        32 => take(n * 4)?.chunks_exact(4).map(|c| T::cast(f32::read_le(c) as f64)).collect(),
        64 => take(n * 8)?.chunks_exact(8).map(|c| T::cast(f64::read_le(c))).collect(),
        other => return Err(TensorError::Format(format!("unsupported dtype width {other}"))),
    };
    if !r.is_empty() {
        return Err(TensorError::Format(format!("{} trailing bytes", r.len())));
    }
    Tensor::new(shape, data)
}

pub fn write<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}

pub fn read<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
