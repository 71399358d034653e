//! Spatio-temporal refinement: 3D window attention, Fourier channel
//! attention, window-wise amplitude/phase refinement and their residual
//! stacking.

use super::layers::{conv, depthwise, layer_norm, pointwise, Init};
use super::window::WindowGrid;
use super::ModelConfig;
use crate::autodiff::{Ctx, Var};
use crate::error::{Error, Result};
use std::rc::Rc;

pub fn init_sfb(init: &mut Init, name: &str, cfg: &ModelConfig) -> Result<()> {
    let c = cfg.channels;
    let hidden = cfg.mlp_ratio * c;
    let r = cfg.reduced();
    init.layer_norm(&format!("{name}.ln1"), c)?;
    for p in ["q", "k", "v"] {
        init.pointwise(&format!("{name}.attn.{p}"), c, c)?;
    }
    init.zero_pointwise(&format!("{name}.attn.proj"), c, c)?;
    init.pointwise(&format!("{name}.fca.fc1"), 2 * c, r)?;
    init.zero_pointwise(&format!("{name}.fca.fc2"), r, c)?;
    init.constant(&format!("{name}.lambda_ca"), &[1], 1.0)?;
    init.layer_norm(&format!("{name}.ln2"), c)?;
    init.pointwise(&format!("{name}.mlp.fc1"), c, hidden)?;
    init.zero_pointwise(&format!("{name}.mlp.fc2"), hidden, c)
}

pub fn init_wfb(init: &mut Init, name: &str, cfg: &ModelConfig) -> Result<()> {
    let c = cfg.channels;
    for d in ARB_DILATIONS {
        init.depthwise(&format!("{name}.arb.d{d}.dw"), 3, c)?;
        init.pointwise(&format!("{name}.arb.d{d}.pw"), c, c)?;
    }
    init.zero_pointwise(&format!("{name}.arb.fuse"), 3 * c, c)?;
    init.depthwise(&format!("{name}.prb.dw"), 3, c)?;
    init.pointwise(&format!("{name}.prb.pw"), c, c)?;
    init.pointwise(&format!("{name}.prb.se1"), c, cfg.reduced())?;
    init.pointwise(&format!("{name}.prb.se2"), cfg.reduced(), c)
}

pub fn init_stad(init: &mut Init, cfg: &ModelConfig) -> Result<()> {
    let c = cfg.channels;
    for r in 0..cfg.n_r {
        for s in 0..cfg.n_s {
            init_sfb(init, &format!("stad.rhatb.{r}.sfb.{s}"), cfg)?;
        }
        init_wfb(init, &format!("stad.rhatb.{r}.wfb"), cfg)?;
        init.zero_conv(&format!("stad.rhatb.{r}.conv"), 3, c, c)?;
    }
    init.conv("stad.conv", 3, c, c)
}

pub const ARB_DILATIONS: [usize; 3] = [1, 2, 4];

#[derive(Clone, Copy, Debug)]
pub struct MhwaOutput {
    pub out: Var,
    /// `[N·heads, L, L]` attention weights.
    pub attention: Var,
}

/// Multi-head self-attention inside `(t, k, k)` windows of `x: [T,H,W,C]`.
pub fn mhwa(ctx: &mut Ctx, x: Var, name: &str, window: [usize; 3], heads: usize, shifted: bool) -> Result<MhwaOutput> {
    let &[t, h, w, c] = ctx.shape(x) else {
        return Err(Error::dim(format!("attention expects [T,H,W,C], got {:?}", ctx.shape(x))));
    };
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("{c} channels not divisible by {heads} heads")));
    }
    let d = c / heads;
    let grid = WindowGrid::new([t, h, w], window, shifted)?;
    let (n, l) = (grid.num_windows(), grid.tokens());
    let part = Rc::new(grid.partition_map(c, heads));
    let mut qkv = Vec::with_capacity(3);
    for p in ["q", "k", "v"] {
        let y = pointwise(ctx, x, &format!("{name}.{p}"))?;
        qkv.push(ctx.gather(y, part.clone(), &[n * heads, l, d])?);
    }
    let scores = ctx.bmm(qkv[0], qkv[1], false, true)?;
    let mut scores = ctx.scale(scores, 1.0 / (d as f64).sqrt());
    if grid.needs_mask() {
        let m = grid.mask();
        let mut rep = Vec::with_capacity(n * heads * l * l);
        for wi in 0..n {
            let block = &m.data()[wi * l * l..(wi + 1) * l * l];
            for _ in 0..heads {
                rep.extend_from_slice(block);
            }
        }
        let mv = ctx.input(crate::Tensor::new(vec![n * heads, l, l], rep)?);
        scores = ctx.add(scores, mv)?;
    }
    let attention = ctx.softmax(scores);
    let mixed = ctx.bmm(attention, qkv[2], false, false)?;
    let unpart = Rc::new(grid.unpartition_map(c, heads));
    let y = ctx.gather(mixed, unpart, &[t, h, w, c])?;
    let out = pointwise(ctx, y, &format!("{name}.proj"))?;
    Ok(MhwaOutput { out, attention })
}

/// Channel gate from pooled real and imaginary spectra, applied to `x`.
pub fn fca(ctx: &mut Ctx, x: Var, name: &str) -> Result<Var> {
    let &[t, _, _, _] = ctx.shape(x) else {
        return Err(Error::dim(format!("FCA expects [T,H,W,C], got {:?}", ctx.shape(x))));
    };
    let spec = ctx.fft2(x)?;
    let re = ctx.index_outer(spec, 0)?;
    let im = ctx.index_outer(spec, 1)?;
    let both = ctx.concat_last(&[re, im])?;
    let pooled = ctx.spatial_mean(both)?;
    let z = pointwise(ctx, pooled, &format!("{name}.fc1"))?;
    let z = ctx.relu(z);
    let gate = pointwise(ctx, z, &format!("{name}.fc2"))?;
    debug_assert_eq!(ctx.shape(gate)[0], t);
    ctx.scale_channels(x, gate)
}

/// Pre-norm transformer block with window attention plus scaled Fourier
/// channel attention, followed by a pre-norm MLP.
pub fn sfb_forward(ctx: &mut Ctx, x: Var, name: &str, cfg: &ModelConfig, shifted: bool) -> Result<Var> {
    let u = layer_norm(ctx, x, &format!("{name}.ln1"))?;
    let wa = mhwa(ctx, u, &format!("{name}.attn"), cfg.window(), cfg.heads, shifted)?.out;
    let ca = fca(ctx, u, &format!("{name}.fca"))?;
    let lam = ctx.p(&format!("{name}.lambda_ca"))?;
    let ca = ctx.mul_scalar(ca, lam)?;
    let a = ctx.add(wa, ca)?;
    let y = ctx.add(x, a)?;
    let z = layer_norm(ctx, y, &format!("{name}.ln2"))?;
    let z = pointwise(ctx, z, &format!("{name}.mlp.fc1"))?;
    let z = ctx.gelu(z);
    let z = pointwise(ctx, z, &format!("{name}.mlp.fc2"))?;
    ctx.add(y, z)
}

/// Amplitude refinement: three dilated depthwise branches, each followed
/// by a pointwise layer, concatenated and fused.
pub fn arb(ctx: &mut Ctx, a: Var, name: &str) -> Result<Var> {
    let mut branches = Vec::with_capacity(3);
    for d in ARB_DILATIONS {
        let y = depthwise(ctx, a, &format!("{name}.d{d}.dw"), d)?;
        branches.push(pointwise(ctx, y, &format!("{name}.d{d}.pw"))?);
    }
    let cat = ctx.concat_last(&branches)?;
    pointwise(ctx, cat, &format!("{name}.fuse"))
}

/// Phase refinement: depthwise-separable conv and squeeze-excitation.
pub fn prb(ctx: &mut Ctx, p: Var, name: &str) -> Result<Var> {
    let y = depthwise(ctx, p, &format!("{name}.dw"), 1)?;
    let y = pointwise(ctx, y, &format!("{name}.pw"))?;
    let s = ctx.spatial_mean(y)?;
    let s = pointwise(ctx, s, &format!("{name}.se1"))?;
    let s = ctx.relu(s);
    let s = pointwise(ctx, s, &format!("{name}.se2"))?;
    let gate = ctx.sigmoid(s);
    ctx.scale_channels(y, gate)
}

/// Window-wise spectral refinement without the outer residual.
pub fn wfb_core(ctx: &mut Ctx, x: Var, name: &str, k: usize) -> Result<Var> {
    let &[t, h, w, c] = ctx.shape(x) else {
        return Err(Error::dim(format!("WFB expects [T,H,W,C], got {:?}", ctx.shape(x))));
    };
    let grid = WindowGrid::new([t, h, w], [1, k, k], false)?;
    let n = grid.num_windows();
    let part = Rc::new(grid.partition_map(c, 1));
    let wins = ctx.gather(x, part, &[n, k, k, c])?;
    let spec = ctx.fft2(wins)?;
    let re = ctx.index_outer(spec, 0)?;
    let im = ctx.index_outer(spec, 1)?;
    let amp = ctx.magnitude(re, im)?;
    let phase = ctx.atan2(im, re)?;
    let amp = arb(ctx, amp, &format!("{name}.arb"))?;
    let phase = prb(ctx, phase, &format!("{name}.prb"))?;
    let cos = ctx.cos(phase);
    let sin = ctx.sin(phase);
    let re = ctx.mul(amp, cos)?;
    let im = ctx.mul(amp, sin)?;
    let spec = ctx.stack(&[re, im])?;
    let back = ctx.ifft2_re(spec)?;
    let unpart = Rc::new(grid.unpartition_map(c, 1));
    ctx.gather(back, unpart, &[t, h, w, c])
}

pub fn wfb(ctx: &mut Ctx, x: Var, name: &str, k: usize) -> Result<Var> {
    let core = wfb_core(ctx, x, name, k)?;
    ctx.add(x, core)
}

/// `n_s` transformer blocks (odd ones shifted), the spectral block and a
/// 3x3 conv inside a residual.
pub fn rhatb(ctx: &mut Ctx, x: Var, name: &str, cfg: &ModelConfig) -> Result<Var> {
    let mut y = x;
    for s in 0..cfg.n_s {
        y = sfb_forward(ctx, y, &format!("{name}.sfb.{s}"), cfg, s % 2 == 1)?;
    }
    y = wfb(ctx, y, &format!("{name}.wfb"), cfg.window_k)?;
    let y = conv(ctx, y, &format!("{name}.conv"), 1)?;
    ctx.add(x, y)
}

pub fn stad_forward(ctx: &mut Ctx, f_ma: Var, cfg: &ModelConfig) -> Result<Var> {
    let mut y = f_ma;
    for r in 0..cfg.n_r {
        y = rhatb(ctx, y, &format!("stad.rhatb.{r}"), cfg)?;
    }
    conv(ctx, y, "stad.conv", 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::model::init_params;
    use crate::model::testutil::{randomize, set, zero_prefix};
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const C: usize = 8;

    fn cfg() -> ModelConfig {
        ModelConfig {
            channels: C,
            heads: 2,
            n_r: 1,
            n_s: 2,
            ..ModelConfig::default()
        }
    }

    fn features(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn eval(store: &ParamStore, x: &Tensor, f: impl FnOnce(&mut Ctx, Var) -> Var) -> Tensor {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, store);
        let xv = ctx.input(x.clone());
        let y = f(&mut ctx, xv);
        ctx.value(y).clone()
    }

    const SFB: &str = "stad.rhatb.0.sfb.0";
    const WFB: &str = "stad.rhatb.0.wfb";

    #[test]
    fn single_token_windows_return_projected_values() {
        let mut store = init_params(&cfg(), 0).unwrap();
        randomize(&mut store, SFB, 1);
        let x = features(&[3, 4, 4, C], 2);
        let name = format!("{SFB}.attn");
        let got = eval(&store, &x, |ctx, xv| mhwa(ctx, xv, &name, [1, 1, 1], 2, false).unwrap().out);
        let want = eval(&store, &x, |ctx, xv| {
            let v = pointwise(ctx, xv, &format!("{name}.v")).unwrap();
            pointwise(ctx, v, &format!("{name}.proj")).unwrap()
        });
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn uniform_tokens_spread_attention_evenly() {
        let mut store = init_params(&cfg(), 0).unwrap();
        randomize(&mut store, SFB, 3);
        let token: Vec<f64> = (0..C).map(|c| c as f64 * 0.3 - 1.0).collect();
        let x = Tensor::from_fn(&[4, 14, 14, C], |i| token[i[3]]);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store);
        let xv = ctx.input(x);
        let out = mhwa(&mut ctx, xv, &format!("{SFB}.attn"), [2, 7, 7], 2, false).unwrap();
        let att = ctx.value(out.attention);
        assert_eq!(att.shape(), &[16, 98, 98]);
        assert!(att.data().iter().all(|&a| (a - 1.0 / 98.0).abs() < 1e-15));
    }

    #[test]
    fn padded_keys_receive_no_attention() {
        let mut store = init_params(&cfg(), 0).unwrap();
        randomize(&mut store, SFB, 4);
        let x = features(&[3, 8, 8, C], 5);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store);
        let xv = ctx.input(x);
        let out = mhwa(&mut ctx, xv, &format!("{SFB}.attn"), [2, 7, 7], 2, true).unwrap();
        let att = ctx.value(out.attention);
        let grid = WindowGrid::new([3, 8, 8], [2, 7, 7], true).unwrap();
        let l = grid.tokens();
        let mut masked = 0;
        for n in 0..grid.num_windows() {
            for key in 0..l {
                if grid.source(n, key).is_none() {
                    for b in [2 * n, 2 * n + 1] {
                        for q in (0..l).filter(|&q| grid.source(n, q).is_some()) {
                            assert_eq!(att.at(&[b, q, key]), 0.0);
                            masked += 1;
                        }
                    }
                }
            }
        }
        assert!(masked > 0);
        for row in att.data().chunks(l) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fca_with_bias_only_gate_scales_by_bias() {
        let mut store = init_params(&cfg(), 0).unwrap();
        randomize(&mut store, SFB, 6);
        zero_prefix(&mut store, &format!("{SFB}.fca.fc2.w"));
        set(&mut store, &format!("{SFB}.fca.fc2.b"), |i| 0.5 + i[0] as f64);
        let x = features(&[3, 5, 6, C], 7);
        let y = eval(&store, &x, |ctx, xv| fca(ctx, xv, &format!("{SFB}.fca")).unwrap());
        let want = Tensor::from_fn(x.shape(), |i| x.at(i) * (0.5 + i[3] as f64));
        assert_eq!(y.shape(), x.shape());
        assert!(y.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn zero_sfb_is_identity() {
        let mut store = init_params(&cfg(), 0).unwrap();
        zero_prefix(&mut store, SFB);
        set(&mut store, &format!("{SFB}.lambda_ca"), |_| 1.0);
        let x = features(&[3, 8, 8, C], 8);
        for shifted in [false, true] {
            let y = eval(&store, &x, |ctx, xv| sfb_forward(ctx, xv, SFB, &cfg(), shifted).unwrap());
            assert_eq!(y, x);
        }
    }

    #[test]
    fn zero_lambda_cuts_the_fourier_branch() {
        let mut store = init_params(&cfg(), 0).unwrap();
        randomize(&mut store, SFB, 9);
        set(&mut store, &format!("{SFB}.lambda_ca"), |_| 0.0);
        let x = features(&[3, 8, 8, C], 10);
        let run = |s: &ParamStore| eval(s, &x, |ctx, xv| sfb_forward(ctx, xv, SFB, &cfg(), true).unwrap());
        let a = run(&store);
        randomize(&mut store, &format!("{SFB}.fca."), 11);
        assert_eq!(a, run(&store));
        set(&mut store, &format!("{SFB}.lambda_ca"), |_| 1.0);
        assert_ne!(a, run(&store));
    }

    #[test]
    fn zero_arb_gives_zero() {
        let mut store = init_params(&cfg(), 0).unwrap();
        zero_prefix(&mut store, &format!("{WFB}.arb."));
        let x = features(&[4, 7, 7, C], 12);
        let y = eval(&store, &x, |ctx, xv| arb(ctx, xv, &format!("{WFB}.arb")).unwrap());
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn arb_impulse_response_is_the_union_of_dilated_footprints() {
        let mut store = init_params(&cfg(), 0).unwrap();
        zero_prefix(&mut store, &format!("{WFB}.arb."));
        for d in ARB_DILATIONS {
            set(&mut store, &format!("{WFB}.arb.d{d}.dw.w"), |_| 1.0);
            set(&mut store, &format!("{WFB}.arb.d{d}.pw.w"), |i| (i[0] == i[1]) as u8 as f64);
        }
        set(&mut store, &format!("{WFB}.arb.fuse.w"), |i| (i[0] % C == i[1]) as u8 as f64);
        let x = Tensor::from_fn(&[1, 13, 13, C], |i| (i[1] == 6 && i[2] == 6 && i[3] == 0) as u8 as f64);
        let y = eval(&store, &x, |ctx, xv| arb(ctx, xv, &format!("{WFB}.arb")).unwrap());
        let mut want = vec![vec![false; 13]; 13];
        for d in ARB_DILATIONS {
            for dy in [-1i64, 0, 1] {
                for dx in [-1i64, 0, 1] {
                    want[(6 + dy * d as i64) as usize][(6 + dx * d as i64) as usize] = true;
                }
            }
        }
        let mut support = 0;
        for (r, row) in want.iter().enumerate() {
            for (c, &on) in row.iter().enumerate() {
                assert_eq!(y.at(&[0, r, c, 0]) != 0.0, on, "({r},{c})");
                support += on as usize;
                for ch in 1..C {
                    assert_eq!(y.at(&[0, r, c, ch]), 0.0);
                }
            }
        }
        assert_eq!(support, 25);
    }

    fn open_gate(store: &mut ParamStore) {
        zero_prefix(store, &format!("{WFB}.prb.se2.w"));
        set(store, &format!("{WFB}.prb.se2.b"), |_| 50.0);
    }

    #[test]
    fn saturated_gate_leaves_the_separable_conv() {
        let mut store = init_params(&cfg(), 0).unwrap();
        randomize(&mut store, &format!("{WFB}.prb."), 13);
        open_gate(&mut store);
        let x = features(&[4, 7, 7, C], 14);
        let name = format!("{WFB}.prb");
        let y = eval(&store, &x, |ctx, xv| prb(ctx, xv, &name).unwrap());
        let want = eval(&store, &x, |ctx, xv| {
            let d = depthwise(ctx, xv, &format!("{name}.dw"), 1).unwrap();
            pointwise(ctx, d, &format!("{name}.pw")).unwrap()
        });
        assert_eq!(y, want);
    }

    #[test]
    fn prb_bias_field_closed_form() {
        let mut store = init_params(&cfg(), 0).unwrap();
        randomize(&mut store, &format!("{WFB}.prb."), 15);
        let name = format!("{WFB}.prb");
        zero_prefix(&mut store, &format!("{name}.dw."));
        zero_prefix(&mut store, &format!("{name}.pw.w"));
        let b: Vec<f64> = store.value(&format!("{name}.pw.b")).unwrap().data().to_vec();
        let v = |n: &str| store.value(&format!("{name}.{n}")).unwrap().clone();
        let (w1, b1, w2, b2) = (v("se1.w"), v("se1.b"), v("se2.w"), v("se2.b"));
        let r = b1.numel();
        let hidden: Vec<f64> = (0..r)
            .map(|j| ((0..C).map(|c| b[c] * w1.at(&[c, j])).sum::<f64>() + b1.data()[j]).max(0.0))
            .collect();
        let gate: Vec<f64> = (0..C)
            .map(|c| {
                let s = (0..r).map(|j| hidden[j] * w2.at(&[j, c])).sum::<f64>() + b2.data()[c];
                1.0 / (1.0 + (-s).exp())
            })
            .collect();
        let x = Tensor::filled(&[2, 5, 5, C], 0.7);
        let y = eval(&store, &x, |ctx, xv| prb(ctx, xv, &name).unwrap());
        for (i, &got) in y.data().iter().enumerate() {
            let c = i % C;
            assert!((got - b[c] * gate[c]).abs() < 1e-12);
        }
    }

    fn identity_branches(store: &mut ParamStore) {
        zero_prefix(store, &format!("{WFB}.arb."));
        set(store, &format!("{WFB}.arb.d1.dw.w"), |i| (i[0] == 1 && i[1] == 1) as u8 as f64);
        set(store, &format!("{WFB}.arb.d1.pw.w"), |i| (i[0] == i[1]) as u8 as f64);
        set(store, &format!("{WFB}.arb.fuse.w"), |i| (i[0] == i[1]) as u8 as f64);
        randomize(store, &format!("{WFB}.prb."), 16);
        set(store, &format!("{WFB}.prb.dw.w"), |i| (i[0] == 1 && i[1] == 1) as u8 as f64);
        zero_prefix(store, &format!("{WFB}.prb.dw.b"));
        set(store, &format!("{WFB}.prb.pw.w"), |i| (i[0] == i[1]) as u8 as f64);
        zero_prefix(store, &format!("{WFB}.prb.pw.b"));
        open_gate(store);
    }

    #[test]
    fn identity_branches_make_the_spectral_core_a_roundtrip() {
        let mut store = init_params(&cfg(), 0).unwrap();
        identity_branches(&mut store);
        for (shape, seed) in [([3, 14, 14, C], 17), ([3, 10, 9, C], 18)] {
            let x = features(&shape, seed);
            let y = eval(&store, &x, |ctx, xv| wfb_core(ctx, xv, WFB, 7).unwrap());
            assert!(y.max_abs_diff(&x) < 1e-9, "{}", y.max_abs_diff(&x));
        }
    }

    #[test]
    fn zero_rhatb_is_identity_and_runs_each_transformer_block_once() {
        let c = ModelConfig { n_s: 3, ..cfg() };
        let mut store = init_params(&c, 0).unwrap();
        zero_prefix(&mut store, "stad.");
        let x = features(&[3, 8, 8, C], 19);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store);
        let xv = ctx.input(x.clone());
        let y = rhatb(&mut ctx, xv, "stad.rhatb.0", &c).unwrap();
        assert_eq!(ctx.value(y), &x);
        assert_eq!(ctx.op_histogram()["softmax"], 3);
        assert_eq!(ctx.op_histogram()["layer_norm"], 6);
    }

    #[test]
    fn zero_stack_returns_the_final_bias_field() {
        let mut store = init_params(&cfg(), 0).unwrap();
        zero_prefix(&mut store, "stad.");
        set(&mut store, "stad.conv.b", |i| i[0] as f64 - 2.0);
        let x = features(&[3, 8, 8, C], 20);
        let y = eval(&store, &x, |ctx, xv| stad_forward(ctx, xv, &cfg()).unwrap());
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().enumerate().all(|(i, &v)| v == (i % C) as f64 - 2.0));
    }

    #[test]
    fn stad_is_deterministic() {
        let mut store = init_params(&cfg(), 0).unwrap();
        randomize(&mut store, "stad.", 21);
        let x = features(&[3, 8, 8, C], 22);
        let a = eval(&store, &x, |ctx, xv| stad_forward(ctx, xv, &cfg()).unwrap());
        let b = eval(&store, &x, |ctx, xv| stad_forward(ctx, xv, &cfg()).unwrap());
        assert_eq!(a, b);
    }
}
