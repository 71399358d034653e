//! Spatio-temporal window partitioning with zero padding, cyclic shift and
//! the matching attention mask.

use crate::autodiff::GATHER_ZERO;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Additive mask value for forbidden attention pairs.
pub const MASK_NEG: f64 = -1e9;

/// Layout of `(t, k, k)` windows over a `[T, H, W, C]` volume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowGrid {
    pub dims: [usize; 3],
    pub window: [usize; 3],
    pub padded: [usize; 3],
    pub shift: [usize; 3],
}

impl WindowGrid {
    pub fn new(dims: [usize; 3], window: [usize; 3], shifted: bool) -> Result<Self> {
        if window.iter().any(|&w| w == 0) {
            return Err(Error::dim("window extents must be positive"));
        }
        if (0..3).any(|a| window[a] > dims[a]) {
            return Err(Error::dim(format!("window {window:?} larger than input {dims:?}")));
        }
        let padded = [0, 1, 2].map(|a| dims[a].div_ceil(window[a]) * window[a]);
        let shift = if shifted {
            window.map(|w| w / 2)
        } else {
            [0; 3]
        };
        Ok(WindowGrid {
            dims,
            window,
            padded,
            shift,
        })
    }

    pub fn counts(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.padded[a] / self.window[a])
    }

    pub fn num_windows(&self) -> usize {
        self.counts().iter().product()
    }

    pub fn tokens(&self) -> usize {
        self.window.iter().product()
    }

    /// Padded-grid coordinate of token `l` of window `n` and, per axis,
    /// whether the cyclic shift wrapped it around.
    fn locate(&self, n: usize, l: usize) -> ([usize; 3], [bool; 3]) {
        let c = self.counts();
        let wi = [n / (c[1] * c[2]), (n / c[2]) % c[1], n % c[2]];
        let w = self.window;
        let li = [l / (w[1] * w[2]), (l / w[2]) % w[1], l % w[2]];
        let mut pos = [0; 3];
        let mut wrapped = [false; 3];
        for a in 0..3 {
            let q = wi[a] * w[a] + li[a];
            let p = q + self.shift[a];
            wrapped[a] = p >= self.padded[a];
            pos[a] = p % self.padded[a];
        }
        (pos, wrapped)
    }

    /// Unpadded voxel under token `l` of window `n`, or `None` for padding.
    pub fn source(&self, n: usize, l: usize) -> Option<[usize; 3]> {
        let (p, _) = self.locate(n, l);
        (0..3).all(|a| p[a] < self.dims[a]).then_some(p)
    }

    /// Gather map producing `[N·heads, L, C/heads]` windows from a
    /// `[T, H, W, C]` tensor; padded tokens read as zero.
    pub fn partition_map(&self, c: usize, heads: usize) -> Vec<u32> {
        let d = c / heads;
        let (nw, l) = (self.num_windows(), self.tokens());
        let [_, h, w] = self.dims;
        let mut map = Vec::with_capacity(nw * l * c);
        for n in 0..nw {
            for hd in 0..heads {
                for li in 0..l {
                    let src = self.source(n, li);
                    for e in 0..d {
                        map.push(match src {
                            Some([t, y, x]) => (((t * h + y) * w + x) * c + hd * d + e) as u32,
                            None => GATHER_ZERO,
                        });
                    }
                }
            }
        }
        map
    }

    /// Gather map restoring `[T, H, W, C]` from partitioned windows.
    pub fn unpartition_map(&self, c: usize, heads: usize) -> Vec<u32> {
        let fwd = self.partition_map(c, heads);
        let mut inv = vec![GATHER_ZERO; self.dims.iter().product::<usize>() * c];
        for (o, &i) in fwd.iter().enumerate() {
            if i != GATHER_ZERO {
                inv[i as usize] = o as u32;
            }
        }
        inv
    }

    /// `[N, L, L]` additive mask: keys on padding, and pairs whose tokens
    /// were brought together only by the cyclic shift, get [`MASK_NEG`].
    pub fn mask(&self) -> Tensor {
        let (nw, l) = (self.num_windows(), self.tokens());
        let mut m = vec![0.0; nw * l * l];
        for n in 0..nw {
            let info: Vec<(bool, [bool; 3])> = (0..l)
                .map(|li| (self.source(n, li).is_some(), self.locate(n, li).1))
                .collect();
            for i in 0..l {
                for j in 0..l {
                    if !info[j].0 || info[i].1 != info[j].1 {
                        m[(n * l + i) * l + j] = MASK_NEG;
                    }
                }
            }
        }
        Tensor::from_raw(vec![nw, l, l], m)
    }

    pub fn needs_mask(&self) -> bool {
        self.padded != self.dims || self.shift != [0; 3]
    }
}

fn volume_dims(x: &Tensor) -> Result<[usize; 4]> {
    match *x.shape() {
        [t, h, w, c] => Ok([t, h, w, c]),
        _ => Err(Error::dim(format!("expected [T,H,W,C], got {:?}", x.shape()))),
    }
}

/// Splits `x: [T, H, W, C]` into `[N, t·k·k, C]` windows.
pub fn window_partition_3d(x: &Tensor, window: [usize; 3], shifted: bool) -> Result<(Tensor, WindowGrid)> {
    let [t, h, w, c] = volume_dims(x)?;
    let grid = WindowGrid::new([t, h, w], window, shifted)?;
    let map = grid.partition_map(c, 1);
    let data = map
        .iter()
        .map(|&i| if i == GATHER_ZERO { 0.0 } else { x.data()[i as usize] })
        .collect();
    let out = Tensor::from_raw(vec![grid.num_windows(), grid.tokens(), c], data);
    Ok((out, grid))
}

pub fn window_unpartition_3d(windows: &Tensor, grid: &WindowGrid) -> Result<Tensor> {
    let &[n, l, c] = windows.shape() else {
        return Err(Error::dim(format!("expected [N,L,C] windows, got {:?}", windows.shape())));
    };
    if n != grid.num_windows() || l != grid.tokens() {
        return Err(Error::dim("windows do not match the grid"));
    }
    let map = grid.unpartition_map(c, 1);
    let data = map.iter().map(|&i| windows.data()[i as usize]).collect();
    let [t, h, w] = grid.dims;
    Ok(Tensor::from_raw(vec![t, h, w, c], data))
}
