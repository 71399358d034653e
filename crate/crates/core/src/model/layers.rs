//! Named-parameter layer helpers shared by the model blocks.

use crate::autodiff::{Ctx, Tape, Var};
use crate::error::Result;
use crate::params::{he_uniform, ParamStore};
use crate::tensor::ops::{pixel_shuffle_map, LAYER_NORM_EPS};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

/// Dense 3x3-style convolution `name.w` / `name.b`.
pub fn conv(ctx: &mut Ctx, x: Var, name: &str, dilation: usize) -> Result<Var> {
    let w = ctx.p(&format!("{name}.w"))?;
    let b = ctx.p(&format!("{name}.b"))?;
    let y = ctx.conv2d(x, w, dilation)?;
    ctx.add_bias(y, b)
}

pub fn depthwise(ctx: &mut Ctx, x: Var, name: &str, dilation: usize) -> Result<Var> {
    let w = ctx.p(&format!("{name}.w"))?;
    let b = ctx.p(&format!("{name}.b"))?;
    let y = ctx.depthwise(x, w, dilation)?;
    ctx.add_bias(y, b)
}

/// Pointwise convolution (a linear map on the channel axis) with bias.
pub fn pointwise(ctx: &mut Ctx, x: Var, name: &str) -> Result<Var> {
    let w = ctx.p(&format!("{name}.w"))?;
    let b = ctx.p(&format!("{name}.b"))?;
    let y = ctx.linear(x, w)?;
    ctx.add_bias(y, b)
}

pub fn layer_norm(ctx: &mut Ctx, x: Var, name: &str) -> Result<Var> {
    let g = ctx.p(&format!("{name}.g"))?;
    let b = ctx.p(&format!("{name}.b"))?;
    ctx.layer_norm(x, g, b, LAYER_NORM_EPS)
}

/// Depth-to-space on `[H,W,r²C]` or `[N,H,W,r²C]`.
pub fn pixel_shuffle(tape: &mut Tape, x: Var, r: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (n, h, w, c, rank4) = match *shape.as_slice() {
        [h, w, c] => (1, h, w, c, false),
        [n, h, w, c] => (n, h, w, c, true),
        _ => return Err(crate::Error::dim(format!("pixel shuffle expects an image, got {shape:?}"))),
    };
    if c % (r * r) != 0 {
        return Err(crate::Error::dim(format!("{c} channels not divisible by {}", r * r)));
    }
    let oc = c / (r * r);
    let map = Rc::new(pixel_shuffle_map(n, h, w, oc, r));
    let out = if rank4 {
        vec![n, h * r, w * r, oc]
    } else {
        vec![h * r, w * r, oc]
    };
    tape.gather(x, map, &out)
}

/// Seeded parameter initializer: He-uniform weights, zero biases, unit
/// layer-norm gains.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: ChaCha8Rng,
}

impl Init<'_> {
    pub fn conv(&mut self, name: &str, k: usize, ci: usize, co: usize) -> Result<()> {
        let w = he_uniform(&[k, k, ci, co], k * k * ci, &mut self.rng);
        self.store.insert(&format!("{name}.w"), w)?;
        self.store.insert(&format!("{name}.b"), Tensor::zeros(&[co]))
    }

    pub fn depthwise(&mut self, name: &str, k: usize, c: usize) -> Result<()> {
        let w = he_uniform(&[k, k, c], k * k, &mut self.rng);
        self.store.insert(&format!("{name}.w"), w)?;
        self.store.insert(&format!("{name}.b"), Tensor::zeros(&[c]))
    }

    pub fn pointwise(&mut self, name: &str, ci: usize, co: usize) -> Result<()> {
        let w = he_uniform(&[ci, co], ci, &mut self.rng);
        self.store.insert(&format!("{name}.w"), w)?;
        self.store.insert(&format!("{name}.b"), Tensor::zeros(&[co]))
    }

    /// Zero weights and bias: the closing layer of a residual branch, so
    /// the branch starts as the identity.
    pub fn zero_pointwise(&mut self, name: &str, ci: usize, co: usize) -> Result<()> {
        self.store.insert(&format!("{name}.w"), Tensor::zeros(&[ci, co]))?;
        self.store.insert(&format!("{name}.b"), Tensor::zeros(&[co]))
    }

    pub fn zero_conv(&mut self, name: &str, k: usize, ci: usize, co: usize) -> Result<()> {
        self.store.insert(&format!("{name}.w"), Tensor::zeros(&[k, k, ci, co]))?;
        self.store.insert(&format!("{name}.b"), Tensor::zeros(&[co]))
    }

    pub fn layer_norm(&mut self, name: &str, c: usize) -> Result<()> {
        self.store.insert(&format!("{name}.g"), Tensor::ones(&[c]))?;
        self.store.insert(&format!("{name}.b"), Tensor::zeros(&[c]))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.store.insert(name, Tensor::filled(shape, value))
    }
}

/// Flat map splitting the channel axis of a `[B, S, heads·d]` tensor into
/// `[B·heads, S, d]`.
pub fn head_split_map(b: usize, s: usize, heads: usize, d: usize) -> Vec<u32> {
    let c = heads * d;
    let mut map = Vec::with_capacity(b * s * c);
    for bi in 0..b {
        for h in 0..heads {
            for si in 0..s {
                for e in 0..d {
                    map.push(((bi * s + si) * c + h * d + e) as u32);
                }
            }
        }
    }
    map
}

/// Inverse of [`head_split_map`].
pub fn head_merge_map(b: usize, s: usize, heads: usize, d: usize) -> Vec<u32> {
    let fwd = head_split_map(b, s, heads, d);
    let mut inv = vec![0u32; fwd.len()];
    for (o, &i) in fwd.iter().enumerate() {
        inv[i as usize] = o as u32;
    }
    inv
}
