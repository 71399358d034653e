//! Moiré statistics: inter-channel colour correlation, a per-patch moiré
//! prior, temporal amplitude differences and the amplitude/phase swap.

use crate::error::{Error, Result};
use crate::tensor::fft::{fft2, ifft2_complex, ComplexSpectrum};
use crate::tensor::Tensor;

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate("channel has zero variance".into()));
    }
    Ok(sab / (saa.sqrt() * sbb.sqrt()))
}

fn channel_planes(img: &Tensor) -> Result<[Vec<f64>; 3]> {
    let &[h, w, 3] = img.shape() else {
        return Err(Error::dim(format!("expected [H,W,3], got {:?}", img.shape())));
    };
    let mut planes: [Vec<f64>; 3] = Default::default();
    for (c, p) in planes.iter_mut().enumerate() {
        *p = (0..h * w).map(|i| img.data()[i * 3 + c]).collect();
    }
    Ok(planes)
}

/// Mean Pearson correlation over the channel pairs (R,G), (G,B), (R,B),
/// taken jointly over all pixels.
pub fn color_correlation(img: &Tensor) -> Result<f64> {
    let [r, g, b] = channel_planes(img)?;
    Ok((pearson(&r, &g)? + pearson(&g, &b)? + pearson(&r, &b)?) / 3.0)
}

/// `CC(img) / CC(gt)`.
pub fn normalized_cc(img: &Tensor, gt: &Tensor) -> Result<f64> {
    img.expect_same_shape(gt)?;
    let g = color_correlation(gt)?;
    if g == 0.0 {
        return Err(Error::Degenerate("reference colour correlation is zero".into()));
    }
    Ok(color_correlation(img)? / g)
}

/// Packed RGGB `[H, W, 4]` as a three-channel image (R, mean of the two
/// greens, B) so the colour correlation applies to RAW frames.
pub fn raw_to_rgb(raw: &Tensor) -> Result<Tensor> {
    let &[h, w, 4] = raw.shape() else {
        return Err(Error::dim(format!("expected [H,W,4], got {:?}", raw.shape())));
    };
    let data = raw
        .data()
        .chunks(4)
        .flat_map(|p| [p[0], 0.5 * (p[1] + p[2]), p[3]])
        .collect();
    Tensor::new(vec![h, w, 3], data)
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v)
}

/// Supremum of the unnormalised colourfulness over images in `[0, 1]^3`,
/// used as the normaliser.
pub fn colorfulness_reference() -> f64 {
    (1.25f64 * 1.09).sqrt()
}

/// Hasler–Süsstrunk colourfulness on opponent channels, scaled to `[0, 1]`.
pub fn colorfulness(img: &Tensor) -> Result<f64> {
    let [r, g, b] = channel_planes(img)?;
    let rg: Vec<f64> = r.iter().zip(&g).map(|(r, g)| r - g).collect();
    let yb: Vec<f64> = r.iter().zip(&g).zip(&b).map(|((r, g), b)| 0.5 * (r + g) - b).collect();
    let (mrg, vrg) = mean_var(&rg);
    let (myb, vyb) = mean_var(&yb);
    let c = (vrg + vyb).sqrt() + 0.3 * (mrg * mrg + myb * myb).sqrt();
    Ok((c / colorfulness_reference()).min(1.0))
}

/// Share of luma spectral energy outside the low band `|u|, |v| <= N/8`
/// (the central quarter of the frequency range on each axis).
pub fn hf_energy(img: &Tensor) -> Result<f64> {
    let &[h, w, 3] = img.shape() else {
        return Err(Error::dim(format!("expected [H,W,3], got {:?}", img.shape())));
    };
    let luma: Vec<f64> = img
        .data()
        .chunks(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect();
    let s = fft2(&Tensor::new(vec![h, w], luma)?)?;
    let (mut total, mut high) = (0.0, 0.0);
    for u in 0..h {
        let fu = u.min(h - u);
        for v in 0..w {
            let fv = v.min(w - v);
            let e = s.re.at(&[u, v]).powi(2) + s.im.at(&[u, v]).powi(2);
            total += e;
            if 8 * fu > h || 8 * fv > w {
                high += e;
            }
        }
    }
    Ok(if total > 0.0 { high / total } else { 0.0 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorReport {
    /// `[rows, cols]` grid of patch priors.
    pub per_patch: Tensor,
    pub mean: f64,
    pub variance: f64,
}

fn crop(img: &Tensor, y0: usize, x0: usize, ph: usize, pw: usize) -> Tensor {
    let &[_, w, c] = img.shape() else { unreachable!() };
    let mut data = Vec::with_capacity(ph * pw * c);
    for y in y0..y0 + ph {
        data.extend_from_slice(&img.data()[(y * w + x0) * c..(y * w + x0 + pw) * c]);
    }
    Tensor::from_raw(vec![ph, pw, c], data)
}

/// Colourfulness plus high-frequency energy per non-overlapping patch;
/// partial border patches are dropped.
pub fn moire_prior(img: &Tensor, patch: usize) -> Result<PriorReport> {
    let &[h, w, 3] = img.shape() else {
        return Err(Error::dim(format!("expected [H,W,3], got {:?}", img.shape())));
    };
    if patch == 0 || h < patch || w < patch {
        return Err(Error::dim(format!("{h}x{w} image is smaller than one {patch}x{patch} patch")));
    }
    let (rows, cols) = (h / patch, w / patch);
    let mut vals = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let p = crop(img, r * patch, c * patch, patch, patch);
            vals.push(colorfulness(&p)? + hf_energy(&p)?);
        }
    }
    let (mean, variance) = mean_var(&vals);
    Ok(PriorReport {
        per_patch: Tensor::new(vec![rows, cols], vals)?,
        mean,
        variance,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalReport {
    pub per_pair: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
}

/// Summed absolute difference of DFT amplitudes between adjacent frames
/// of a `[T, H, W, C]` clip.
pub fn temporal_stats(clip: &Tensor) -> Result<TemporalReport> {
    let &[t, _, _, _] = clip.shape() else {
        return Err(Error::dim(format!("expected [T,H,W,C], got {:?}", clip.shape())));
    };
    if t < 2 {
        return Err(Error::dim("temporal statistics need at least two frames"));
    }
    let amps: Vec<Tensor> = (0..t)
        .map(|f| fft2(&clip.index_outer(f)).map(|s| s.amplitude()))
        .collect::<Result<_>>()?;
    let per_pair: Vec<f64> = amps
        .windows(2)
        .map(|p| p[1].data().iter().zip(p[0].data()).map(|(a, b)| (a - b).abs()).sum())
        .collect();
    let (mean, variance) = mean_var(&per_pair);
    Ok(TemporalReport { per_pair, mean, variance })
}

/// Exchanges DFT amplitudes: returns (phase of `a` with amplitude of `b`,
/// phase of `b` with amplitude of `a`), per channel.
pub fn amp_phase_swap(a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    a.expect_same_shape(b)?;
    let (sa, sb) = (fft2(a)?, fft2(b)?);
    let (amp_a, amp_b) = (sa.amplitude(), sb.amplitude());
    let one = ComplexSpectrum::from_polar(&amp_b, &sa.phase())?;
    let two = ComplexSpectrum::from_polar(&amp_a, &sb.phase())?;
    Ok((real_part(&one)?, real_part(&two)?))
}

fn real_part(s: &ComplexSpectrum) -> Result<Tensor> {
    let z = ifft2_complex(s)?;
    let bound = 1e-9 * z.re.max_abs().max(1.0);
    let residue = z.im.max_abs();
    if residue > bound {
        return Err(Error::Numerical(format!(
            "inverse transform left an imaginary residue of {residue:e}"
        )));
    }
    Ok(z.re)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_hand_example() {
        let img = Tensor::from_fn(&[2, 2, 3], |i| {
            let diag = (i[0] == i[1]) as u8 as f64;
            if i[2] == 0 { 1.0 - diag } else { diag }
        });
        assert!((color_correlation(&img).unwrap() + 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn constant_channel_is_degenerate() {
        let img = Tensor::from_fn(&[2, 2, 3], |i| if i[2] == 0 { 0.3 } else { (i[0] + i[1]) as f64 });
        assert!(matches!(color_correlation(&img), Err(Error::Degenerate(_))));
    }

    #[test]
    fn gray_patch_has_zero_prior() {
        let r = moire_prior(&Tensor::filled(&[16, 16, 3], 0.5), 16).unwrap();
        assert!(r.mean.abs() < 1e-12);
    }

    #[test]
    fn green_magenta_split_colorfulness() {
        // rg = -1/+1 and yb = +0.5/-0.5 with zero means: sqrt(1.25) before scaling
        let img = Tensor::from_fn(&[4, 4, 3], |i| {
            let green = i[1] < 2;
            (if i[2] == 1 { green } else { !green }) as u8 as f64
        });
        assert!((colorfulness(&img).unwrap() - 1.0 / 1.09f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn single_frame_is_rejected() {
        assert!(matches!(temporal_stats(&Tensor::zeros(&[1, 4, 4, 1])), Err(Error::Dimension(_))));
    }
}
