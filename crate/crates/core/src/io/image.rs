//! 8-bit binary PPM (P6) and little-endian PFM images.

use super::{read_bytes, write_bytes};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

fn rgb_dims(img: &Tensor) -> Result<(usize, usize)> {
    match *img.shape() {
        [h, w, 3] => Ok((h, w)),
        _ => Err(Error::dim(format!("expected [H,W,3] image, got {:?}", img.shape()))),
    }
}

pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = rgb_dims(img)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// Parses P6 output of [`encode_ppm`] (single-space separated header).
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                offset: start as u64,
                msg: "truncated PPM header".into(),
            });
        }
        fields.push((start, String::from_utf8_lossy(&bytes[start..pos]).to_string()));
    }
    pos += 1;
    if fields[0].1 != "P6" || fields[3].1 != "255" {
        return Err(Error::Format {
            offset: 0,
            msg: "only 8-bit P6 is supported".into(),
        });
    }
    let num = |(at, s): &(usize, String)| -> Result<usize> {
        s.parse().map_err(|_| Error::Format {
            offset: *at as u64,
            msg: format!("bad dimension '{s}'"),
        })
    };
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    if bytes.len() != pos + w * h * 3 {
        return Err(Error::Format {
            offset: pos as u64,
            msg: "PPM payload length mismatch".into(),
        });
    }
    let data = bytes[pos..].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![h, w, 3], data)
}

/// Color PFM; rows are stored bottom to top as the format requires.
pub fn encode_pfm(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = match *img.shape() {
        [h, w, 3] => (h, w, 3),
        [h, w] | [h, w, 1] => (h, w, 1),
        _ => return Err(Error::dim(format!("PFM needs [H,W], [H,W,1] or [H,W,3], got {:?}", img.shape()))),
    };
    let tag = if c == 3 { "PF" } else { "Pf" };
    let mut out = format!("{tag}\n{w} {h}\n-1.0\n").into_bytes();
    for y in (0..h).rev() {
        for v in &img.data()[y * w * c..(y + 1) * w * c] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    write_bytes(path, &encode_ppm(img)?)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&read_bytes(path)?)
}

pub fn write_pfm(path: &Path, img: &Tensor) -> Result<()> {
    write_bytes(path, &encode_pfm(img)?)
}
