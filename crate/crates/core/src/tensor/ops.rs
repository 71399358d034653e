//! Primitive kernels: matrix products, convolutions, normalization,
//! activations and the index rearrangements used by the model.
//!
//! Convolutions follow the cross-correlation convention (no kernel flip)
//! with zero "same" padding, so the output spatial extent equals the input
//! extent (or `ceil(extent / stride)` for strided convolutions).
//!
//! Reductions always run in a fixed order. Where rayon is used, each output
//! element is produced by exactly one task, so results do not depend on the
//! number of worker threads.

use super::Tensor;
use crate::error::{Error, Result};
use rayon::prelude::*;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `[m, k] x [k, n] -> [m, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(Error::dim(format!(
            "matmul expects rank-2 operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    };
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(a.data(), b.data(), &mut out, m, k, n, false, false);
    Ok(Tensor::from_raw(vec![m, n], out))
}

/// `out += op(a) * op(b)` for row-major matrices where `op` optionally
/// transposes. `op(a)` is `m x k`, `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) {
    let bt;
    let b = if tb {
        let mut t = vec![0.0; k * n];
        for j in 0..n {
            for p in 0..k {
                t[p * n + j] = b[j * k + p];
            }
        }
        bt = t;
        &bt[..]
    } else {
        b
    };
    let axpy = |row: &mut [f64], av: f64, p: usize| {
        if av != 0.0 {
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    };
    if ta {
        for p in 0..k {
            for i in 0..m {
                axpy(&mut out[i * n..(i + 1) * n], a[p * m + i], p);
            }
        }
    } else {
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                axpy(row, a[i * k + p], p);
            }
        }
    }
}

/// Kernel layout selector for [`conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    /// Dense kernel `[kh, kw, c_in, c_out]`.
    Full,
    /// One spatial filter per channel, kernel `[kh, kw, c]`.
    Depthwise,
    /// 1x1 channel mixing, kernel `[c_in, c_out]`.
    Pointwise,
}

/// Geometry shared by the convolution kernels.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub ci: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub dil: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvGeom {
    pub fn new(
        x_shape: &[usize],
        k: (usize, usize),
        co: usize,
        dil: usize,
        stride: usize,
    ) -> Result<Self> {
        let (n, h, w, ci) = match *x_shape {
            [h, w, c] => (1, h, w, c),
            [n, h, w, c] => (n, h, w, c),
            _ => {
                return Err(Error::dim(format!(
                    "convolution input must be [H,W,C] or [N,H,W,C], got {x_shape:?}"
                )))
            }
        };
        let (kh, kw) = k;
        if dil == 0 || stride == 0 {
            return Err(Error::dim("dilation and stride must be >= 1"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::dim(format!(
                "same padding needs odd kernel extents, got {kh}x{kw}"
            )));
        }
        let ext_h = (kh - 1) * dil + 1;
        let ext_w = (kw - 1) * dil + 1;
        let pad_h = (ext_h - 1) / 2;
        let pad_w = (ext_w - 1) / 2;
        if ext_h > h + 2 * pad_h || ext_w > w + 2 * pad_w {
            return Err(Error::dim(format!(
                "kernel extent {ext_h}x{ext_w} exceeds padded input {}x{}",
                h + 2 * pad_h,
                w + 2 * pad_w
            )));
        }
        Ok(ConvGeom {
            n,
            h,
            w,
            ci,
            co,
            kh,
            kw,
            dil,
            stride,
            oh: h.div_ceil(stride),
            ow: w.div_ceil(stride),
            pad_h,
            pad_w,
        })
    }

    pub fn out_shape(&self, rank4: bool) -> Vec<usize> {
        if rank4 {
            vec![self.n, self.oh, self.ow, self.co]
        } else {
            vec![self.oh, self.ow, self.co]
        }
    }

    /// Input coordinate hit by output `o` and tap `k`, if inside the image.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, dil: usize, pad: usize, ext: usize) -> Option<usize> {
        let p = (o * stride + k * dil) as isize - pad as isize;
        (p >= 0 && (p as usize) < ext).then_some(p as usize)
    }
}

/// Zero-padded "same" convolution over channel-last images.
pub fn conv2d(x: &Tensor, kernel: &Tensor, mode: ConvMode, dilation: usize) -> Result<Tensor> {
    let rank4 = x.rank() == 4;
    match mode {
        ConvMode::Full => {
            let &[kh, kw, ci, co] = kernel.shape() else {
                return Err(Error::dim(format!(
                    "full kernel must be [kh,kw,ci,co], got {:?}",
                    kernel.shape()
                )));
            };
            let g = ConvGeom::new(x.shape(), (kh, kw), co, dilation, 1)?;
            check_channels(g.ci, ci)?;
            Ok(Tensor::from_raw(
                g.out_shape(rank4),
                conv_full_forward(&g, x.data(), kernel.data()),
            ))
        }
        ConvMode::Depthwise => {
            let &[kh, kw, c] = kernel.shape() else {
                return Err(Error::dim(format!(
                    "depthwise kernel must be [kh,kw,c], got {:?}",
                    kernel.shape()
                )));
            };
            let g = ConvGeom::new(x.shape(), (kh, kw), c, dilation, 1)?;
            check_channels(g.ci, c)?;
            Ok(Tensor::from_raw(
                g.out_shape(rank4),
                depthwise_forward(&g, x.data(), kernel.data()),
            ))
        }
        ConvMode::Pointwise => {
            let w = match *kernel.shape() {
                [_, _] => kernel.clone(),
                [1, 1, ci, co] => kernel.reshape(&[ci, co])?,
                _ => {
                    return Err(Error::dim(format!(
                        "pointwise kernel must be 1x1, got {:?}",
                        kernel.shape()
                    )))
                }
            };
            linear(x, &w)
        }
    }
}

/// Strided dense convolution with "same" padding; output extent `ceil(H/stride)`.
pub fn conv2d_strided(x: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
    let &[kh, kw, ci, co] = kernel.shape() else {
        return Err(Error::dim("strided convolution needs a [kh,kw,ci,co] kernel"));
    };
    let g = ConvGeom::new(x.shape(), (kh, kw), co, 1, stride)?;
    check_channels(g.ci, ci)?;
    Ok(Tensor::from_raw(
        g.out_shape(x.rank() == 4),
        conv_full_forward(&g, x.data(), kernel.data()),
    ))
}

fn check_channels(have: usize, want: usize) -> Result<()> {
    if have != want {
        return Err(Error::dim(format!(
            "input has {have} channels, kernel expects {want}"
        )));
    }
    Ok(())
}

pub(crate) fn conv_full_forward(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.oh * g.ow * g.co];
    out.par_chunks_mut(g.ow * g.co)
        .enumerate()
        .for_each(|(row, orow)| {
            let (b, oy) = (row / g.oh, row % g.oh);
            for ky in 0..g.kh {
                let Some(iy) = ConvGeom::src(oy, ky, g.stride, g.dil, g.pad_h, g.h) else {
                    continue;
                };
                for ox in 0..g.ow {
                    let o = &mut orow[ox * g.co..(ox + 1) * g.co];
                    for kx in 0..g.kw {
                        let Some(ix) = ConvGeom::src(ox, kx, g.stride, g.dil, g.pad_w, g.w) else {
                            continue;
                        };
                        let xi = ((b * g.h + iy) * g.w + ix) * g.ci;
                        let wk = (ky * g.kw + kx) * g.ci * g.co;
                        for c in 0..g.ci {
                            let xv = x[xi + c];
                            if xv == 0.0 {
                                continue;
                            }
                            let wrow = &w[wk + c * g.co..wk + (c + 1) * g.co];
                            for (ov, &wv) in o.iter_mut().zip(wrow) {
                                *ov += xv * wv;
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Returns `(dx, dw)` for the dense convolution.
pub(crate) fn conv_full_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let img_in = g.h * g.w * g.ci;
    let img_out = g.oh * g.ow * g.co;
    let ksz = g.kh * g.kw * g.ci * g.co;
    // Per-image partials, summed below in image order.
    let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..g.n)
        .into_par_iter()
        .map(|b| {
            let mut dx = vec![0.0; img_in];
            let mut dw = vec![0.0; ksz];
            let xb = &x[b * img_in..(b + 1) * img_in];
            let gb = &gout[b * img_out..(b + 1) * img_out];
            for oy in 0..g.oh {
                for ky in 0..g.kh {
                    let Some(iy) = ConvGeom::src(oy, ky, g.stride, g.dil, g.pad_h, g.h) else {
                        continue;
                    };
                    for ox in 0..g.ow {
                        let go = &gb[(oy * g.ow + ox) * g.co..(oy * g.ow + ox + 1) * g.co];
                        for kx in 0..g.kw {
                            let Some(ix) = ConvGeom::src(ox, kx, g.stride, g.dil, g.pad_w, g.w)
                            else {
                                continue;
                            };
                            let xi = (iy * g.w + ix) * g.ci;
                            let wk = (ky * g.kw + kx) * g.ci * g.co;
                            for c in 0..g.ci {
                                let wrow = &w[wk + c * g.co..wk + (c + 1) * g.co];
                                let mut acc = 0.0;
                                for (&wv, &gv) in wrow.iter().zip(go) {
                                    acc += wv * gv;
                                }
                                dx[xi + c] += acc;
                                let xv = xb[xi + c];
                                if xv != 0.0 {
                                    let dwrow = &mut dw[wk + c * g.co..wk + (c + 1) * g.co];
                                    for (d, &gv) in dwrow.iter_mut().zip(go) {
                                        *d += xv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            (dx, dw)
        })
        .collect();
    let mut dx = Vec::with_capacity(g.n * img_in);
    let mut dw = vec![0.0; ksz];
    for (pdx, pdw) in parts {
        dx.extend_from_slice(&pdx);
        for (a, b) in dw.iter_mut().zip(&pdw) {
            *a += b;
        }
    }
    (dx, dw)
}

pub(crate) fn depthwise_forward(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let c = g.ci;
    let mut out = vec![0.0; g.n * g.oh * g.ow * c];
    out.par_chunks_mut(g.ow * c).enumerate().for_each(|(row, orow)| {
        let (b, oy) = (row / g.oh, row % g.oh);
        for ky in 0..g.kh {
            let Some(iy) = ConvGeom::src(oy, ky, g.stride, g.dil, g.pad_h, g.h) else {
                continue;
            };
            for ox in 0..g.ow {
                let o = &mut orow[ox * c..(ox + 1) * c];
                for kx in 0..g.kw {
                    let Some(ix) = ConvGeom::src(ox, kx, g.stride, g.dil, g.pad_w, g.w) else {
                        continue;
                    };
                    let xi = ((b * g.h + iy) * g.w + ix) * c;
                    let wk = (ky * g.kw + kx) * c;
                    for ch in 0..c {
                        o[ch] += x[xi + ch] * w[wk + ch];
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn depthwise_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let c = g.ci;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ky in 0..g.kh {
                let Some(iy) = ConvGeom::src(oy, ky, g.stride, g.dil, g.pad_h, g.h) else {
                    continue;
                };
                for ox in 0..g.ow {
                    let go = ((b * g.oh + oy) * g.ow + ox) * c;
                    for kx in 0..g.kw {
                        let Some(ix) = ConvGeom::src(ox, kx, g.stride, g.dil, g.pad_w, g.w) else {
                            continue;
                        };
                        let xi = ((b * g.h + iy) * g.w + ix) * c;
                        let wk = (ky * g.kw + kx) * c;
                        for ch in 0..c {
                            let gv = gout[go + ch];
                            dx[xi + ch] += w[wk + ch] * gv;
                            dw[wk + ch] += x[xi + ch] * gv;
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Applies `w: [c_in, c_out]` to the last axis of `x`.
pub fn linear(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let &[ci, co] = w.shape() else {
        return Err(Error::dim(format!("linear weight must be rank 2, got {:?}", w.shape())));
    };
    let last = *x.shape().last().unwrap();
    if last != ci {
        return Err(Error::dim(format!(
            "linear expects last extent {ci}, got {:?}",
            x.shape()
        )));
    }
    let m = x.numel() / ci;
    let mut out = vec![0.0; m * co];
    const ROWS: usize = 64;
    out.par_chunks_mut(ROWS * co)
        .enumerate()
        .for_each(|(blk, chunk)| {
            let rows = chunk.len() / co;
            let xs = &x.data()[blk * ROWS * ci..(blk * ROWS + rows) * ci];
            gemm(xs, w.data(), chunk, rows, ci, co, false, false);
        });
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = co;
    Ok(Tensor::from_raw(shape, out))
}

/// Normalizes the last axis to zero mean and unit variance, then applies
/// `gamma * xhat + beta`. Returns `(y, xhat, rstd)`.
pub(crate) fn layer_norm_parts(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let c = *x.shape().last().unwrap();
    let rows = x.numel() / c;
    let mut y = vec![0.0; x.numel()];
    let mut xhat = vec![0.0; x.numel()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xs = &x.data()[r * c..(r + 1) * c];
        let mean = xs.iter().sum::<f64>() / c as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..c {
            let h = (xs[j] - mean) * rs;
            xhat[r * c + j] = h;
            y[r * c + j] = gamma[j] * h + beta[j];
        }
    }
    (y, xhat, rstd)
}

/// Layer normalization over the channel (last) axis.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let c = *x.shape().last().unwrap();
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::dim(format!(
            "layer norm affine parameters must have {c} entries"
        )));
    }
    if eps <= 0.0 {
        return Err(Error::usage("layer norm eps must be positive"));
    }
    let (y, _, _) = layer_norm_parts(x, gamma.data(), beta.data(), eps);
    Ok(Tensor::from_raw(x.shape().to_vec(), y))
}

pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Supported pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
    Sigmoid,
    /// Softmax over the last axis.
    Softmax,
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Gelu => x.map(gelu_scalar),
        Activation::Relu => x.map(|v| v.max(0.0)),
        Activation::Sigmoid => x.map(sigmoid_scalar),
        Activation::Softmax => softmax_last(x),
    }
}

/// Max-subtracted softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Tensor {
    let c = *x.shape().last().unwrap();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::from_raw(x.shape().to_vec(), out)
}

/// Flat gather map for depth-to-space: `[N,H,W,r*r*C] -> [N,rH,rW,C]`.
///
/// Input channel `k = (i*r + j)*C + c` lands at output offset `(i, j)`
/// inside the `r x r` block, channel `c`.
pub(crate) fn pixel_shuffle_map(n: usize, h: usize, w: usize, c: usize, r: usize) -> Vec<u32> {
    let (oh, ow) = (h * r, w * r);
    let mut idx = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                let (sy, i) = (y / r, y % r);
                let (sx, j) = (x / r, x % r);
                for ch in 0..c {
                    let k = (i * r + j) * c + ch;
                    idx.push((((b * h + sy) * w + sx) * r * r * c + k) as u32);
                }
            }
        }
    }
    idx
}

fn shuffle_dims(x: &Tensor) -> Result<(usize, usize, usize, usize, bool)> {
    match *x.shape() {
        [h, w, c] => Ok((1, h, w, c, false)),
        [n, h, w, c] => Ok((n, h, w, c, true)),
        _ => Err(Error::dim(format!(
            "pixel shuffle expects [H,W,C] or [N,H,W,C], got {:?}",
            x.shape()
        ))),
    }
}

pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (n, h, w, c, rank4) = shuffle_dims(x)?;
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::dim(format!(
            "{c} channels are not divisible by r^2 = {}",
            r * r
        )));
    }
    let oc = c / (r * r);
    let map = pixel_shuffle_map(n, h, w, oc, r);
    let data = map.iter().map(|&i| x.data()[i as usize]).collect();
    let shape = if rank4 {
        vec![n, h * r, w * r, oc]
    } else {
        vec![h * r, w * r, oc]
    };
    Ok(Tensor::from_raw(shape, data))
}

/// Inverse of [`pixel_shuffle`]: `[N,rH,rW,C] -> [N,H,W,r*r*C]`.
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (n, oh, ow, c, rank4) = shuffle_dims(x)?;
    if r == 0 || oh % r != 0 || ow % r != 0 {
        return Err(Error::dim(format!(
            "spatial extents {oh}x{ow} are not divisible by {r}"
        )));
    }
    let (h, w) = (oh / r, ow / r);
    let map = pixel_shuffle_map(n, h, w, c, r);
    let mut data = vec![0.0; x.numel()];
    for (o, &i) in map.iter().enumerate() {
        data[i as usize] = x.data()[o];
    }
    let shape = if rank4 {
        vec![n, h, w, r * r * c]
    } else {
        vec![h, w, r * r * c]
    };
    Ok(Tensor::from_raw(shape, data))
}

/// Per-channel spatial mean: `[H,W,C] -> [1,1,C]`, `[N,H,W,C] -> [N,1,1,C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, h, w, c, rank4) = shuffle_dims(x)?;
    let mut out = vec![0.0; n * c];
    let s = (h * w) as f64;
    for b in 0..n {
        for p in 0..h * w {
            for ch in 0..c {
                out[b * c + ch] += x.data()[(b * h * w + p) * c + ch];
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= s);
    let shape = if rank4 { vec![n, 1, 1, c] } else { vec![1, 1, c] };
    Ok(Tensor::from_raw(shape, out))
}
