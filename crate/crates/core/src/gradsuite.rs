//! Finite-difference checks of every network block, every loss and the
//! full model on tiny seeded configurations.
//!
//! Parameters are redrawn from a scaled normal so no branch starts at an
//! exact zero, then each block output is reduced by a fixed random
//! projection.

use crate::autodiff::gradcheck::random_projection;
use crate::autodiff::{grad_check, Ctx, GradCheckOptions, GradCheckReport, Var};
use crate::error::Result;
use crate::model::{self, dmad, stad, ModelConfig, Stage};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::losses::{l1_loss, mc_loss, pd_loss, PerceptualNet};
use crate::train::wnnm::{GroupingParams, MpPlan, WnnmParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const BLOCK_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradRow {
    pub name: &'static str,
    pub tol: f64,
    pub report: GradCheckReport,
}

impl GradRow {
    pub fn pass(&self) -> bool {
        self.report.max_rel_err <= self.tol
    }
}

/// Block-level configuration: odd window sizes, two heads everywhere and
/// a shifted second transformer block.
pub fn block_config() -> ModelConfig {
    ModelConfig {
        channels: 8,
        n_m: 2,
        mcb_heads: 2,
        n_r: 1,
        n_s: 2,
        window_t: 2,
        window_k: 3,
        heads: 2,
        mlp_ratio: 2,
    }
}

pub fn model_config() -> ModelConfig {
    ModelConfig {
        channels: 8,
        n_m: 1,
        n_r: 1,
        n_s: 1,
        heads: 2,
        ..ModelConfig::default()
    }
}

/// Parameters of `cfg` with every entry redrawn as `N(0, scale²)`.
pub fn randomized_params(cfg: &ModelConfig, seed: u64, scale: f64) -> Result<ParamStore> {
    let mut store = model::init_params(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let names: Vec<String> = store.names().map(String::from).collect();
    for n in names {
        let shape = store.value(&n)?.shape().to_vec();
        store.set_value(&n, Tensor::randn(&shape, &mut rng).scale(scale))?;
    }
    Ok(store)
}

fn check_block<F>(store: &ParamStore, prefix: &str, inputs: Vec<Tensor>, tol: f64, seed: u64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = store.names().filter(|n| n.starts_with(prefix)).map(String::from).collect();
    let n_in = inputs.len();
    let mut all = inputs;
    for n in &names {
        all.push(store.value(n)?.clone());
    }
    let opts = GradCheckOptions {
        tol,
        seed,
        ..Default::default()
    };
    grad_check(
        |tape, vars| {
            let mut ctx = Ctx::new(tape, store);
            for (n, &v) in names.iter().zip(&vars[n_in..]) {
                ctx.bind(n, v)?;
            }
            let y = f(&mut ctx, &vars[..n_in])?;
            random_projection(&mut ctx, y, seed)
        },
        &all,
        &opts,
    )
}

fn check_loss<F>(inputs: Vec<Tensor>, seed: u64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut crate::autodiff::Tape, &[Var]) -> Result<Var>,
{
    let opts = GradCheckOptions {
        tol: BLOCK_TOL,
        seed,
        ..Default::default()
    };
    grad_check(f, &inputs, &opts)
}

/// Names of the rows produced by [`run`], in order.
pub const ROWS: [&str; 18] = [
    "conv_block_stack",
    "ddb",
    "mcb",
    "mhwa",
    "fca",
    "sfb",
    "arb",
    "prb",
    "wfb",
    "rhatb",
    "eib",
    "loss_l1",
    "loss_pd",
    "loss_mc",
    "loss_perceptual",
    "loss_mp",
    "model_stage1",
    "model_stage2",
];

pub fn run(seed: u64) -> Result<Vec<GradRow>> {
    let mut rows = Vec::with_capacity(ROWS.len());
    for (i, &name) in ROWS.iter().enumerate() {
        rows.push(run_row(name, seed.wrapping_add(i as u64))?);
    }
    Ok(rows)
}

pub fn run_row(name: &'static str, seed: u64) -> Result<GradRow> {
    let cfg = block_config();
    let store = randomized_params(&cfg, seed, 0.4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feat = |rng: &mut ChaCha8Rng| Tensor::randn(&[3, 8, 8, cfg.channels], rng);
    let mut tol = BLOCK_TOL;
    let report = match name {
        "conv_block_stack" => check_block(&store, "dmad.pdb.", vec![feat(&mut rng)], tol, seed, |ctx, x| {
            dmad::conv_block_stack(ctx, x[0], "dmad.pdb", cfg.n_m)
        })?,
        "ddb" => {
            let inputs = vec![feat(&mut rng), feat(&mut rng)];
            check_block(&store, "dmad.ddb.", inputs, tol, seed, |ctx, x| {
                let out = dmad::ddb_heads(ctx, x[0], x[1])?;
                let a = random_projection(ctx, out.i_cf_raw, seed + 1)?;
                let b = random_projection(ctx, out.i_pm_raw, seed + 2)?;
                let c = random_projection(ctx, out.i_m_rgb, seed + 3)?;
                let ab = ctx.add(a, b)?;
                ctx.add(ab, c)
            })?
        }
        "mcb" => {
            let inputs = vec![feat(&mut rng), feat(&mut rng)];
            check_block(&store, "dmad.mcb.", inputs, tol, seed, |ctx, x| {
                Ok(dmad::mcb_forward(ctx, x[0], x[1], cfg.mcb_heads)?.f_ma)
            })?
        }
        "mhwa" => check_block(&store, "stad.rhatb.0.sfb.1.attn.", vec![feat(&mut rng)], tol, seed, |ctx, x| {
            Ok(stad::mhwa(ctx, x[0], "stad.rhatb.0.sfb.1.attn", cfg.window(), cfg.heads, true)?.out)
        })?,
        "fca" => check_block(&store, "stad.rhatb.0.sfb.0.fca.", vec![feat(&mut rng)], tol, seed, |ctx, x| {
            stad::fca(ctx, x[0], "stad.rhatb.0.sfb.0.fca")
        })?,
        "sfb" => check_block(&store, "stad.rhatb.0.sfb.1.", vec![feat(&mut rng)], tol, seed, |ctx, x| {
            stad::sfb_forward(ctx, x[0], "stad.rhatb.0.sfb.1", &cfg, true)
        })?,
        "arb" => {
            let amp = Tensor::uniform(&[6, 3, 3, cfg.channels], 0.1, 2.0, &mut rng);
            check_block(&store, "stad.rhatb.0.wfb.arb.", vec![amp], tol, seed, |ctx, x| {
                stad::arb(ctx, x[0], "stad.rhatb.0.wfb.arb")
            })?
        }
        "prb" => {
            let phase = Tensor::uniform(&[6, 3, 3, cfg.channels], -3.0, 3.0, &mut rng);
            check_block(&store, "stad.rhatb.0.wfb.prb.", vec![phase], tol, seed, |ctx, x| {
                stad::prb(ctx, x[0], "stad.rhatb.0.wfb.prb")
            })?
        }
        "wfb" => check_block(&store, "stad.rhatb.0.wfb.", vec![feat(&mut rng)], tol, seed, |ctx, x| {
            stad::wfb(ctx, x[0], "stad.rhatb.0.wfb", cfg.window_k)
        })?,
        "rhatb" => check_block(&store, "stad.rhatb.0.", vec![feat(&mut rng)], tol, seed, |ctx, x| {
            stad::rhatb(ctx, x[0], "stad.rhatb.0", &cfg)
        })?,
        "eib" => {
            let inputs = vec![feat(&mut rng), feat(&mut rng)];
            check_block(&store, "eib.", inputs, tol, seed, |ctx, x| model::eib(ctx, x[0], x[1]))?
        }
        "loss_l1" => {
            let a = Tensor::randn(&[8, 8, 3], &mut rng);
            let b = Tensor::randn(&[8, 8, 3], &mut rng);
            check_loss(vec![a, b], seed, |t, v| l1_loss(t, v[0], v[1]))?
        }
        "loss_pd" => {
            let a = Tensor::randn(&[3, 8, 8, 3], &mut rng);
            let b = Tensor::randn(&[3, 8, 8, 3], &mut rng);
            check_loss(vec![a, b], seed, |t, v| pd_loss(t, v[0], v[1]))?
        }
        "loss_mc" => {
            let inputs = (0..3).map(|_| Tensor::randn(&[3, 4, 4, 4], &mut rng)).collect();
            check_loss(inputs, seed, |t, v| mc_loss(t, v[0], v[1], v[2]))?
        }
        "loss_perceptual" => {
            let net = PerceptualNet::default();
            let a = Tensor::uniform(&[16, 16, 3], 0.0, 1.0, &mut rng);
            let b = Tensor::uniform(&[16, 16, 3], 0.0, 1.0, &mut rng);
            check_loss(vec![a, b], seed, |t, v| net.loss(t, v[0], v[1]))?
        }
        "loss_mp" => {
            let x = Tensor::randn(&[3, 8, 8, 4], &mut rng);
            let gp = GroupingParams {
                patch: 4,
                stride: 2,
                k: 4,
                search: 4,
                max_groups: 9,
            };
            let plan = MpPlan::build(&x, &[1], &gp, &WnnmParams::default())?;
            check_loss(vec![x], seed, |t, v| plan.loss(t, v[0]))?
        }
        "model_stage1" | "model_stage2" => {
            tol = MODEL_TOL;
            let mcfg = model_config();
            let store = randomized_params(&mcfg, seed, 0.3)?;
            let stage = if name == "model_stage1" { Stage::One } else { Stage::Two };
            let raw = Tensor::uniform(&[3, 8, 8, 4], 0.0, 1.0, &mut rng);
            check_block(&store, "", vec![raw], tol, seed, |ctx, x| {
                Ok(model::mocha_forward(ctx, x[0], &mcfg, stage)?.rgb)
            })?
        }
        _ => return Err(crate::Error::usage(format!("unknown gradient check {name:?}"))),
    };
    Ok(GradRow { name, tol, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_row_is_rejected() {
        assert!(run_row("nope", 0).is_err());
    }

    #[test]
    fn randomized_params_cover_every_name() {
        let cfg = block_config();
        let a = model::init_params(&cfg, 1).unwrap();
        let b = randomized_params(&cfg, 1, 0.4).unwrap();
        assert_eq!(a.len(), b.len());
        assert!(b.iter().all(|(_, p)| p.value.max_abs() > 0.0));
    }
}
