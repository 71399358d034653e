//! Minimal camera ISP and the packed-RAW layout.
//!
//! Order: white balance, bilinear demosaic, unsharp mask, clamp, gamma.

use super::capture::cfa_channel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GAMMA: f64 = 2.2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IspConfig {
    /// Per-channel gains applied to R, G and B sites.
    pub wb_gains: [f64; 3],
    /// Unsharp-mask strength; 0 disables sharpening.
    pub sharpen: f64,
}

impl Default for IspConfig {
    fn default() -> Self {
        IspConfig {
            wb_gains: [1.0; 3],
            sharpen: 0.5,
        }
    }
}

/// Reflect-101 index (`-1 -> 1`, `n -> n-2`), which keeps Bayer parity.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

fn filter3(plane: &[f64], h: usize, w: usize, k: &[[f64; 3]; 3]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (dy, row) in k.iter().enumerate() {
                let sy = reflect(y as isize + dy as isize - 1, h);
                for (dx, &kv) in row.iter().enumerate() {
                    if kv != 0.0 {
                        acc += kv * plane[sy * w + reflect(x as isize + dx as isize - 1, w)];
                    }
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

const GREEN_KERNEL: [[f64; 3]; 3] = [[0.0, 0.25, 0.0], [0.25, 1.0, 0.25], [0.0, 0.25, 0.0]];
const RB_KERNEL: [[f64; 3]; 3] = [[0.25, 0.5, 0.25], [0.5, 1.0, 0.5], [0.25, 0.5, 0.25]];
const BLUR_KERNEL: [[f64; 3]; 3] = [
    [1.0 / 16.0, 2.0 / 16.0, 1.0 / 16.0],
    [2.0 / 16.0, 4.0 / 16.0, 2.0 / 16.0],
    [1.0 / 16.0, 2.0 / 16.0, 1.0 / 16.0],
];

fn mosaic_dims(bayer: &Tensor) -> Result<(usize, usize)> {
    match *bayer.shape() {
        [h, w] => Ok((h, w)),
        _ => Err(Error::dim(format!("mosaic must be [H,W], got {:?}", bayer.shape()))),
    }
}

/// Bilinear demosaic of a linear RGGB mosaic to `[H, W, 3]`.
pub fn demosaic_bilinear(bayer: &Tensor) -> Result<Tensor> {
    let (h, w) = mosaic_dims(bayer)?;
    let mut planes = vec![vec![0.0; h * w]; 3];
    for y in 0..h {
        for x in 0..w {
            planes[cfa_channel(y, x)][y * w + x] = bayer.data()[y * w + x];
        }
    }
    let r = filter3(&planes[0], h, w, &RB_KERNEL);
    let g = filter3(&planes[1], h, w, &GREEN_KERNEL);
    let b = filter3(&planes[2], h, w, &RB_KERNEL);
    let data = (0..h * w).flat_map(|i| [r[i], g[i], b[i]]).collect();
    Ok(Tensor::from_raw(vec![h, w, 3], data))
}

/// `x + strength * (x - blur(x))` per channel.
pub fn unsharp_mask(img: &Tensor, strength: f64) -> Result<Tensor> {
    let &[h, w, c] = img.shape() else {
        return Err(Error::dim(format!("expected [H,W,C], got {:?}", img.shape())));
    };
    let mut out = img.clone();
    for ch in 0..c {
        let plane: Vec<f64> = (0..h * w).map(|i| img.data()[i * c + ch]).collect();
        let blur = filter3(&plane, h, w, &BLUR_KERNEL);
        for i in 0..h * w {
            out.data_mut()[i * c + ch] = plane[i] + strength * (plane[i] - blur[i]);
        }
    }
    Ok(out)
}

pub fn gamma_encode(x: f64) -> f64 {
    x.clamp(0.0, 1.0).powf(1.0 / GAMMA)
}

pub fn gamma_decode(x: f64) -> f64 {
    x.clamp(0.0, 1.0).powf(GAMMA)
}

/// Linear RGGB mosaic in `[0, 1]` to display sRGB.
pub fn isp_pipeline(bayer: &Tensor, cfg: &IspConfig) -> Result<Tensor> {
    let (h, w) = mosaic_dims(bayer)?;
    if bayer.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Config("ISP input must lie in [0, 1]".into()));
    }
    let mut balanced = bayer.clone();
    for y in 0..h {
        for x in 0..w {
            balanced.data_mut()[y * w + x] *= cfg.wb_gains[cfa_channel(y, x)];
        }
    }
    let rgb = demosaic_bilinear(&balanced)?;
    let sharp = if cfg.sharpen != 0.0 {
        unsharp_mask(&rgb, cfg.sharpen)?
    } else {
        rgb
    };
    Ok(sharp.map(gamma_encode))
}

/// `[2H, 2W]` mosaic (or `[T, 2H, 2W]`) to packed `[H, W, 4]` (or
/// `[T, H, W, 4]`) with channels R, G (red row), G (blue row), B.
pub fn pack_rggb(bayer: &Tensor) -> Result<Tensor> {
    let (t, h2, w2, rank3) = match *bayer.shape() {
        [h, w] => (1, h, w, false),
        [t, h, w] => (t, h, w, true),
        _ => return Err(Error::dim(format!("mosaic must be [H,W] or [T,H,W], got {:?}", bayer.shape()))),
    };
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(Error::dim(format!("mosaic extents {h2}x{w2} must be even")));
    }
    let (h, w) = (h2 / 2, w2 / 2);
    let d = bayer.data();
    let mut out = Vec::with_capacity(d.len());
    for f in 0..t {
        let base = f * h2 * w2;
        for y in 0..h {
            for x in 0..w {
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    out.push(d[base + (2 * y + dy) * w2 + 2 * x + dx]);
                }
            }
        }
    }
    let shape = if rank3 { vec![t, h, w, 4] } else { vec![h, w, 4] };
    Ok(Tensor::from_raw(shape, out))
}

/// Inverse of [`pack_rggb`].
pub fn unpack_rggb(packed: &Tensor) -> Result<Tensor> {
    let (t, h, w, rank4) = match *packed.shape() {
        [h, w, 4] => (1, h, w, false),
        [t, h, w, 4] => (t, h, w, true),
        _ => return Err(Error::dim(format!("packed RAW must end in 4 channels, got {:?}", packed.shape()))),
    };
    let (h2, w2) = (2 * h, 2 * w);
    let d = packed.data();
    let mut out = vec![0.0; d.len()];
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                let src = ((f * h + y) * w + x) * 4;
                for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                    out[f * h2 * w2 + (2 * y + dy) * w2 + 2 * x + dx] = d[src + k];
                }
            }
        }
    }
    let shape = if rank4 { vec![t, h2, w2] } else { vec![h2, w2] };
    Ok(Tensor::from_raw(shape, out))
}

/// Samples a full-colour `[H, W, 3]` image through the RGGB pattern.
pub fn remosaic(rgb: &Tensor) -> Result<Tensor> {
    let &[h, w, 3] = rgb.shape() else {
        return Err(Error::dim(format!("expected [H,W,3], got {:?}", rgb.shape())));
    };
    let data = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| rgb.data()[(y * w + x) * 3 + cfa_channel(y, x)])
        .collect();
    Ok(Tensor::from_raw(vec![h, w], data))
}
