//! Binary tensor serialization.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//!   rank:    u32
//!   extents: u64 * rank
//!   dtype:   u32   (1 = f32, 2 = f64)
//!   values:  raw contiguous payload
//! ```
//!
//! Checkpoints are containers of these records; in-memory compute is always
//! f64, the f32 dtype narrows on write and widens on read.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn tag(self) -> u32 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            other => Err(Error::Format(format!("unknown dtype tag {other}"))),
        }
    }
}

pub fn write_tensor(w: &mut impl Write, t: &Tensor, dtype: Dtype) -> Result<()> {
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    w.write_all(&dtype.tag().to_le_bytes())?;
    match dtype {
        Dtype::F32 => {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Dtype::F64 => {
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let e = read_u64(r)? as usize;
        numel = numel
            .checked_mul(e)
            .ok_or_else(|| Error::Format("tensor extent overflow".into()))?;
        shape.push(e);
    }
    let dtype = Dtype::from_tag(read_u32(r)?)?;
    let mut data = Vec::with_capacity(numel);
    match dtype {
        Dtype::F32 => {
            let mut buf = [0u8; 4];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(f32::from_le_bytes(buf) as f64);
            }
        }
        Dtype::F64 => {
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
        }
    }
    Tensor::new(shape, data)
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_f64() {
        let t = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.37 - 1.0);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, Dtype::F64).unwrap();
        // rank(4) + 2 extents(16) + tag(4) + 12 values(96)
        assert_eq!(buf.len(), 4 + 16 + 4 + 96);
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn roundtrip_f32_narrows() {
        let t = Tensor::from_fn(&[5], |i| (i as f64).exp());
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, Dtype::F32).unwrap();
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert!((a - b).abs() <= b.abs() * 1e-6);
        }
    }

    #[test]
    fn rejects_unknown_dtype() {
        let mut buf = Vec::new();
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&1u64.to_le_bytes());
        buf.extend_from_slice(&9u32.to_le_bytes());
        buf.extend_from_slice(&1.0f64.to_le_bytes());
        assert!(read_tensor(&mut buf.as_slice()).is_err());
    }
}
