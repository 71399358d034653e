//! Two-dimensional discrete Fourier transforms.
//!
//! Forward transforms are unnormalized; inverse transforms carry the full
//! `1/(H*W)` factor. Power-of-two lengths use an iterative radix-2 kernel;
//! any other length falls back to the direct O(N^2) DFT, which is also the
//! correctness oracle for the fast path.
//!
//! Image tensors are channel-last, so the transform runs over the `H` and `W`
//! axes of `[H, W]`, `[H, W, C]` or `[N, H, W, C]` input, independently for
//! every batch entry and channel.

use super::Tensor;
use crate::error::Result;
use std::f64::consts::PI;

/// Real and imaginary planes of a spectrum, each shaped like the transformed input.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum {
    pub re: Tensor,
    pub im: Tensor,
}

impl ComplexSpectrum {
    pub fn new(re: Tensor, im: Tensor) -> Result<Self> {
        re.expect_same_shape(&im)?;
        Ok(ComplexSpectrum { re, im })
    }

    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }

    pub fn amplitude(&self) -> Tensor {
        self.re
            .zip_map(&self.im, |r, i| r.hypot(i))
            .expect("planes share a shape")
    }

    /// Argument of every bin via the two-argument arctangent.
    pub fn phase(&self) -> Tensor {
        self.re
            .zip_map(&self.im, |r, i| i.atan2(r))
            .expect("planes share a shape")
    }

    pub fn from_polar(amplitude: &Tensor, phase: &Tensor) -> Result<Self> {
        let re = amplitude.zip_map(phase, |a, p| a * p.cos())?;
        let im = amplitude.zip_map(phase, |a, p| a * p.sin())?;
        Ok(ComplexSpectrum { re, im })
    }
}

/// `exp(-2*pi*i*k/n)` (or its conjugate for the inverse), exact at the
/// quarter turns so purely real bins keep an exactly zero imaginary part.
fn twiddles(n: usize, inverse: bool) -> Vec<(f64, f64)> {
    let sign = if inverse { 1.0 } else { -1.0 };
    (0..n)
        .map(|k| {
            if (4 * k) % n == 0 {
                match 4 * k / n {
                    0 => (1.0, 0.0),
                    1 => (0.0, sign),
                    2 => (-1.0, 0.0),
                    _ => (0.0, -sign),
                }
            } else {
                let (s, c) = (2.0 * PI * k as f64 / n as f64).sin_cos();
                (c, sign * s)
            }
        })
        .collect()
}

/// Direct DFT of one complex sequence; the O(N^2) oracle.
pub fn dft_1d(re: &mut [f64], im: &mut [f64], inverse: bool) {
    Plan::new(re.len(), inverse, FftPath::Direct).run(re, im);
}

/// Iterative radix-2 FFT; `re.len()` must be a power of two.
pub fn fft_radix2(re: &mut [f64], im: &mut [f64], tw: &[(f64, f64)]) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());
    let bits = n.trailing_zeros();
    if bits > 0 {
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if j > i {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = n / len;
        for start in (0..n).step_by(len) {
            for j in 0..half {
                let (wr, wi) = tw[j * step];
                let a = start + j;
                let b = a + half;
                let vr = re[b] * wr - im[b] * wi;
                let vi = re[b] * wi + im[b] * wr;
                re[b] = re[a] - vr;
                im[b] = im[a] - vi;
                re[a] += vr;
                im[a] += vi;
            }
        }
        len <<= 1;
    }
}

/// Which 1-D kernel to run along each axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FftPath {
    /// Radix-2 where possible, direct DFT otherwise.
    Auto,
    /// Always the direct DFT.
    Direct,
}

struct Plan {
    n: usize,
    tw: Vec<(f64, f64)>,
    fast: bool,
}

impl Plan {
    fn new(n: usize, inverse: bool, path: FftPath) -> Self {
        Plan {
            n,
            tw: twiddles(n, inverse),
            fast: path == FftPath::Auto && n.is_power_of_two(),
        }
    }

    fn run(&self, re: &mut [f64], im: &mut [f64]) {
        if self.fast {
            fft_radix2(re, im, &self.tw);
        } else {
            let n = self.n;
            let mut out_re = vec![0.0; n];
            let mut out_im = vec![0.0; n];
            for k in 0..n {
                let (mut sr, mut si) = (0.0, 0.0);
                for j in 0..n {
                    let (wr, wi) = self.tw[(j * k) % n];
                    sr += re[j] * wr - im[j] * wi;
                    si += re[j] * wi + im[j] * wr;
                }
                out_re[k] = sr;
                out_im[k] = si;
            }
            re.copy_from_slice(&out_re);
            im.copy_from_slice(&out_im);
        }
    }
}

/// In-place 2-D transform of `batch` channel-last images of size `h x w x c`.
/// The inverse applies the `1/(h*w)` normalization.
pub fn transform_2d(
    re: &mut [f64],
    im: &mut [f64],
    dims: (usize, usize, usize, usize),
    inverse: bool,
    path: FftPath,
) {
    let (batch, h, w, c) = dims;
    debug_assert_eq!(re.len(), batch * h * w * c);
    let row_plan = Plan::new(w, inverse, path);
    let col_plan = Plan::new(h, inverse, path);
    let mut br = vec![0.0; h.max(w)];
    let mut bi = vec![0.0; h.max(w)];
    for b in 0..batch {
        let base = b * h * w * c;
        for ch in 0..c {
            for y in 0..h {
                let row = base + y * w * c + ch;
                for x in 0..w {
                    br[x] = re[row + x * c];
                    bi[x] = im[row + x * c];
                }
                row_plan.run(&mut br[..w], &mut bi[..w]);
                for x in 0..w {
                    re[row + x * c] = br[x];
                    im[row + x * c] = bi[x];
                }
            }
            for x in 0..w {
                let col = base + x * c + ch;
                for y in 0..h {
                    br[y] = re[col + y * w * c];
                    bi[y] = im[col + y * w * c];
                }
                col_plan.run(&mut br[..h], &mut bi[..h]);
                for y in 0..h {
                    re[col + y * w * c] = br[y];
                    im[col + y * w * c] = bi[y];
                }
            }
        }
    }
    if inverse {
        let s = 1.0 / (h * w) as f64;
        re.iter_mut().for_each(|v| *v *= s);
        im.iter_mut().for_each(|v| *v *= s);
    }
}

fn fft2_with(x: &Tensor, path: FftPath) -> Result<ComplexSpectrum> {
    let dims = x.image_dims()?;
    let mut re = x.data().to_vec();
    let mut im = vec![0.0; re.len()];
    transform_2d(&mut re, &mut im, dims, false, path);
    Ok(ComplexSpectrum {
        re: Tensor::from_raw(x.shape().to_vec(), re),
        im: Tensor::from_raw(x.shape().to_vec(), im),
    })
}

/// Unnormalized forward 2-D DFT of a real image tensor.
pub fn fft2(x: &Tensor) -> Result<ComplexSpectrum> {
    fft2_with(x, FftPath::Auto)
}

/// Forward 2-D DFT evaluated with the direct O(N^2) kernel only.
pub fn dft2_direct(x: &Tensor) -> Result<ComplexSpectrum> {
    fft2_with(x, FftPath::Direct)
}

/// Normalized inverse 2-D DFT returning both planes.
pub fn ifft2_complex(s: &ComplexSpectrum) -> Result<ComplexSpectrum> {
    let dims = s.re.image_dims()?;
    let mut re = s.re.data().to_vec();
    let mut im = s.im.data().to_vec();
    transform_2d(&mut re, &mut im, dims, true, FftPath::Auto);
    Ok(ComplexSpectrum {
        re: Tensor::from_raw(s.shape().to_vec(), re),
        im: Tensor::from_raw(s.shape().to_vec(), im),
    })
}

/// Normalized inverse 2-D DFT, keeping the real part.
pub fn ifft2(s: &ComplexSpectrum) -> Result<Tensor> {
    Ok(ifft2_complex(s)?.re)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        a.max_abs_diff(b) / b.max_abs().max(1e-300)
    }

    #[test]
    fn constant_image_has_only_dc() {
        let x = Tensor::filled(&[4, 8], 0.25);
        let s = fft2(&x).unwrap();
        assert_eq!(s.re.at(&[0, 0]), 0.25 * 32.0);
        for (i, (r, m)) in s.re.data().iter().zip(s.im.data()).enumerate().skip(1) {
            assert!(r.abs() < 1e-15 && m.abs() < 1e-15, "bin {i}");
        }
    }

    #[test]
    fn roundtrip_power_of_two_and_odd_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for shape in [[8usize, 16, 3], [7, 5, 2], [1, 4, 1]] {
            let x = Tensor::randn(&shape, &mut rng);
            let back = ifft2(&fft2(&x).unwrap()).unwrap();
            assert!(rel_err(&back, &x) < 1e-12, "{shape:?}");
        }
    }

    #[test]
    fn radix2_matches_direct_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in [4usize, 8, 16] {
            let x = Tensor::randn(&[2, n, n, 2], &mut rng);
            let fast = fft2(&x).unwrap();
            let slow = dft2_direct(&x).unwrap();
            let scale = slow.amplitude().max_abs();
            assert!(fast.re.max_abs_diff(&slow.re) / scale < 1e-12);
            assert!(fast.im.max_abs_diff(&slow.im) / scale < 1e-12);
        }
    }

    #[test]
    fn real_bins_keep_exact_zero_imaginary_part() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[8, 8], &mut rng);
        let s = fft2(&x).unwrap();
        for (u, v) in [(0, 0), (0, 4), (4, 0), (4, 4)] {
            assert_eq!(s.im.at(&[u, v]), 0.0);
        }
    }
}
