//! `NDT1` binary tensors: magic, dtype code (0 = f32, 1 = f64), rank,
//! little-endian `u32` extents, then the row-major little-endian payload.

use super::{read_bytes, write_bytes};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"NDT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub fn encode(t: &Tensor, dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + dtype.width() * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(dtype.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        match dtype {
            DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

/// Decodes one record starting at `base`; returns the tensor and the
/// offset just past it.
pub fn decode_at(bytes: &[u8], base: usize) -> Result<(Tensor, usize)> {
    let need = |pos: usize, n: usize, what: &str| -> Result<()> {
        if bytes.len() < pos + n {
            Err(format_err(pos, format!("truncated {what}")))
        } else {
            Ok(())
        }
    };
    need(base, 6, "header")?;
    if &bytes[base..base + 4] != MAGIC {
        return Err(format_err(base, "bad magic, expected NDT1"));
    }
    let dtype = match bytes[base + 4] {
        0 => DType::F32,
        1 => DType::F64,
        c => return Err(format_err(base + 4, format!("unknown dtype code {c}"))),
    };
    let rank = bytes[base + 5] as usize;
    if rank == 0 {
        return Err(format_err(base + 5, "rank must be positive"));
    }
    let mut pos = base + 6;
    need(pos, 4 * rank, "extents")?;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        if d == 0 {
            return Err(format_err(pos, "zero extent"));
        }
        shape.push(d);
        pos += 4;
    }
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| format_err(base + 6, "extent product overflows"))?;
    let w = dtype.width();
    need(pos, n * w, "payload")?;
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let at = pos + i * w;
        let v = match dtype {
            DType::F32 => f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as f64,
            DType::F64 => f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()),
        };
        if !v.is_finite() {
            return Err(format_err(at, "non-finite value"));
        }
        data.push(v);
    }
    Ok((Tensor::new(shape, data)?, pos + n * w))
}

/// Decodes a buffer that holds exactly one record.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let (t, end) = decode_at(bytes, 0)?;
    if end != bytes.len() {
        return Err(format_err(end, "trailing bytes after tensor"));
    }
    Ok(t)
}

pub fn write(path: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    write_bytes(path, &encode(t, dtype))
}

pub fn read(path: &Path) -> Result<Tensor> {
    decode(&read_bytes(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_roundtrip_is_exact() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| (i[0] * 12 + i[1] * 4 + i[2]) as f64 / 7.0);
        assert_eq!(decode(&encode(&t, DType::F64)).unwrap(), t);
    }

    #[test]
    fn f32_roundtrip_rounds() {
        let t = Tensor::new(vec![2], vec![0.1, 0.5]).unwrap();
        let back = decode(&encode(&t, DType::F32)).unwrap();
        assert_eq!(back.data()[1], 0.5);
        assert!((back.data()[0] - 0.1).abs() < 1e-7);
    }

    #[test]
    fn errors_carry_offsets() {
        let t = Tensor::ones(&[2, 2]);
        let mut b = encode(&t, DType::F64);
        b[0] = b'X';
        assert!(matches!(decode(&b), Err(Error::Format { offset: 0, .. })));
        let b = encode(&t, DType::F64);
        let cut = &b[..b.len() - 3];
        assert!(matches!(decode(cut), Err(Error::Format { offset: 14, .. })));
        let mut b = encode(&t, DType::F64);
        b[4] = 9;
        assert!(matches!(decode(&b), Err(Error::Format { offset: 4, .. })));
    }
}
