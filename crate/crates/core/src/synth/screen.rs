//! Emitted-light field of a vertical-stripe RGB display.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fraction of field cell `j` (in `0..pitch`) covered by the stripe of
/// colour `c`, whose extent is `[c*pitch/3, (c+1)*pitch/3)`.
pub fn stripe_coverage(pitch: usize, j: usize, c: usize) -> f64 {
    let lo = c as f64 * pitch as f64 / 3.0;
    let hi = (c + 1) as f64 * pitch as f64 / 3.0;
    let (a, b) = (j as f64, j as f64 + 1.0);
    (hi.min(b) - lo.max(a)).max(0.0)
}

/// Expands every content pixel into `pitch x pitch` cells. A cell emits each
/// primary in proportion to how much of it that primary's stripe covers, so
/// with `pitch = 3` the three columns of a pixel are pure R, G and B.
pub fn render_screen(content: &Tensor, pitch: usize) -> Result<Tensor> {
    let &[h, w, 3] = content.shape() else {
        return Err(Error::dim(format!("content must be [H,W,3], got {:?}", content.shape())));
    };
    if pitch < 2 {
        return Err(Error::Config(format!("subpixel pitch must be >= 2, got {pitch}")));
    }
    let cov: Vec<[f64; 3]> = (0..pitch)
        .map(|j| [0, 1, 2].map(|c| stripe_coverage(pitch, j, c)))
        .collect();
    let (fh, fw) = (h * pitch, w * pitch);
    let mut data = Vec::with_capacity(fh * fw * 3);
    let cd = content.data();
    for y in 0..fh {
        let sy = y / pitch;
        for x in 0..fw {
            let (sx, j) = (x / pitch, x % pitch);
            let px = &cd[(sy * w + sx) * 3..(sy * w + sx) * 3 + 3];
            for c in 0..3 {
                data.push(px[c] * cov[j][c]);
            }
        }
    }
    Ok(Tensor::from_raw(vec![fh, fw, 3], data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_pixel_pitch_three_is_pure_stripes() {
        let f = render_screen(&Tensor::ones(&[1, 1, 3]), 3).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                for c in 0..3 {
                    assert_eq!(f.at(&[y, x, c]), (x == c) as u8 as f64);
                }
            }
        }
    }

    #[test]
    fn coverage_sums_to_one_per_cell() {
        for pitch in 2..7 {
            for j in 0..pitch {
                let s: f64 = (0..3).map(|c| stripe_coverage(pitch, j, c)).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
