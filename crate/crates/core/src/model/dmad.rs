//! Moiré decoupling: twin residual conv stacks, the supervision heads and
//! channel-transposed cross attention that gates content by moiré.

use super::layers::{self, conv, depthwise, head_merge_map, head_split_map, layer_norm, pointwise, Init};
use super::ModelConfig;
use crate::autodiff::{Ctx, Var};
use crate::error::{Error, Result};
use std::rc::Rc;

pub fn init_block(init: &mut Init, name: &str, c: usize) -> Result<()> {
    init.depthwise(&format!("{name}.dw"), 3, c)?;
    init.layer_norm(&format!("{name}.ln"), c)?;
    init.pointwise(&format!("{name}.pw1"), c, c)?;
    init.zero_pointwise(&format!("{name}.pw2"), c, c)
}

pub fn init_dmad(init: &mut Init, cfg: &ModelConfig) -> Result<()> {
    let c = cfg.channels;
    for branch in ["pdb", "mpb"] {
        for i in 0..cfg.n_m {
            init_block(init, &format!("dmad.{branch}.{i}"), c)?;
        }
    }
    for head in ["cf", "pm"] {
        init.conv(&format!("dmad.ddb.{head}.c1"), 3, c, c)?;
        init.conv(&format!("dmad.ddb.{head}.c2"), 3, c, 4)?;
    }
    init.conv("dmad.ddb.rgb.c1", 3, 4, c)?;
    init.conv("dmad.ddb.rgb.c2", 3, c, 12)?;
    for p in ["q", "k", "v"] {
        init.pointwise(&format!("dmad.mcb.{p}.pw"), c, c)?;
        init.depthwise(&format!("dmad.mcb.{p}.dw"), 3, c)?;
    }
    init.constant("dmad.mcb.log_temp", &[cfg.mcb_heads], 0.0)
}

/// One block: depthwise 3x3, layer norm, pointwise, GELU, pointwise.
pub fn conv_block(ctx: &mut Ctx, x: Var, name: &str) -> Result<Var> {
    let y = depthwise(ctx, x, &format!("{name}.dw"), 1)?;
    let y = layer_norm(ctx, y, &format!("{name}.ln"))?;
    let y = pointwise(ctx, y, &format!("{name}.pw1"))?;
    let y = ctx.gelu(y);
    pointwise(ctx, y, &format!("{name}.pw2"))
}

/// `x + Σ_i B_i(x)`: every block reads the same input.
pub fn conv_block_stack(ctx: &mut Ctx, x: Var, prefix: &str, n_m: usize) -> Result<Var> {
    if n_m == 0 {
        return Err(Error::usage("a block stack needs at least one block"));
    }
    let mut acc = x;
    for i in 0..n_m {
        let b = conv_block(ctx, x, &format!("{prefix}.{i}"))?;
        acc = ctx.add(acc, b)?;
    }
    Ok(acc)
}

/// Content branch and moiré branch over the same shallow features.
pub fn mdb_forward(ctx: &mut Ctx, f0: Var, n_m: usize) -> Result<(Var, Var)> {
    let f_c = conv_block_stack(ctx, f0, "dmad.pdb", n_m)?;
    let f_m = conv_block_stack(ctx, f0, "dmad.mpb", n_m)?;
    Ok((f_c, f_m))
}

#[derive(Clone, Copy, Debug)]
pub struct DdbOutput {
    pub i_cf_raw: Var,
    pub i_pm_raw: Var,
    pub i_m_rgb: Var,
}

fn raw_head(ctx: &mut Ctx, x: Var, name: &str) -> Result<Var> {
    let y = conv(ctx, x, &format!("{name}.c1"), 1)?;
    let y = ctx.gelu(y);
    conv(ctx, y, &format!("{name}.c2"), 1)
}

/// Clean RAW, moiré RAW and the sRGB rendering of the clean RAW estimate.
pub fn ddb_heads(ctx: &mut Ctx, f_c: Var, f_m: Var) -> Result<DdbOutput> {
    let i_cf_raw = raw_head(ctx, f_c, "dmad.ddb.cf")?;
    let i_pm_raw = raw_head(ctx, f_m, "dmad.ddb.pm")?;
    let y = conv(ctx, i_cf_raw, "dmad.ddb.rgb.c1", 1)?;
    let y = conv(ctx, y, "dmad.ddb.rgb.c2", 1)?;
    let i_m_rgb = layers::pixel_shuffle(ctx, y, 2)?;
    Ok(DdbOutput {
        i_cf_raw,
        i_pm_raw,
        i_m_rgb,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct McbOutput {
    pub f_ma: Var,
    pub a_ma: Var,
    /// Row-stochastic `[T·heads, d, d]` channel attention.
    pub attention: Var,
}

fn embed(ctx: &mut Ctx, x: Var, name: &str) -> Result<Var> {
    let y = pointwise(ctx, x, &format!("{name}.pw"))?;
    depthwise(ctx, y, &format!("{name}.dw"), 1)
}

/// Queries from content, keys and values from moiré; attention is a
/// `d x d` map per head and frame, normalized over key channels.
pub fn mcb_forward(ctx: &mut Ctx, f_c: Var, f_m: Var, heads: usize) -> Result<McbOutput> {
    let shape = ctx.shape(f_c).to_vec();
    if ctx.shape(f_m) != shape.as_slice() {
        return Err(Error::dim(format!("MCB inputs {:?} vs {shape:?}", ctx.shape(f_m))));
    }
    let &[t, h, w, c] = shape.as_slice() else {
        return Err(Error::dim(format!("MCB expects [T,H,W,C], got {shape:?}")));
    };
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("{c} channels not divisible by {heads} heads")));
    }
    let (s, d) = (h * w, c / heads);
    let q = embed(ctx, f_c, "dmad.mcb.q")?;
    let k = embed(ctx, f_m, "dmad.mcb.k")?;
    let v = embed(ctx, f_m, "dmad.mcb.v")?;
    let split = Rc::new(head_split_map(t, s, heads, d));
    let q = ctx.gather(q, split.clone(), &[t * heads, s, d])?;
    let k = ctx.gather(k, split.clone(), &[t * heads, s, d])?;
    let v = ctx.gather(v, split, &[t * heads, s, d])?;
    let logits = ctx.bmm(q, k, true, false)?;
    let logits = ctx.scale(logits, 1.0 / s as f64);
    let log_temp = ctx.p("dmad.mcb.log_temp")?;
    let neg = ctx.scale(log_temp, -1.0);
    let inv_temp = ctx.exp(neg);
    let per_batch = Rc::new((0..t * heads).map(|i| (i % heads) as u32).collect::<Vec<_>>());
    let inv_temp = ctx.gather(inv_temp, per_batch, &[t * heads, 1])?;
    let logits = ctx.reshape(logits, &[t * heads, d * d, 1])?;
    let logits = ctx.scale_channels(logits, inv_temp)?;
    let logits = ctx.reshape(logits, &[t * heads, d, d])?;
    let attention = ctx.softmax(logits);
    let mixed = ctx.bmm(v, attention, false, true)?;
    let merge = Rc::new(head_merge_map(t, s, heads, d));
    let f_attn = ctx.gather(mixed, merge, &[t, h, w, c])?;
    let a_ma = ctx.sigmoid(f_attn);
    let f_ma = ctx.mul(f_c, a_ma)?;
    Ok(McbOutput {
        f_ma,
        a_ma,
        attention,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct DmadOutput {
    pub f_c: Var,
    pub f_m: Var,
    pub f_ma: Var,
    pub a_ma: Var,
    pub attention: Var,
    pub ddb: DdbOutput,
}

pub fn dmad_forward(ctx: &mut Ctx, f0: Var, cfg: &ModelConfig) -> Result<DmadOutput> {
    let (f_c, f_m) = mdb_forward(ctx, f0, cfg.n_m)?;
    let ddb = ddb_heads(ctx, f_c, f_m)?;
    let mcb = mcb_forward(ctx, f_c, f_m, cfg.mcb_heads)?;
    Ok(DmadOutput {
        f_c,
        f_m,
        f_ma: mcb.f_ma,
        a_ma: mcb.a_ma,
        attention: mcb.attention,
        ddb,
    })
}
