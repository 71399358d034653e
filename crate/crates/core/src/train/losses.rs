//! Reconstruction, decoupling and prior losses, and their per-stage sums.

use super::wnnm::{GroupingParams, MpPlan, WnnmParams};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{MochaOutput, Stage};
use crate::params::he_uniform;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const PERCEPTUAL_SEED: u64 = 0xC0FFEE;
pub const PERCEPTUAL_WIDTHS: [usize; 4] = [8, 16, 32, 64];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub perceptual: f64,
    pub pd: f64,
    pub mp: f64,
    pub mc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            perceptual: 0.01,
            pd: 1.0,
            mp: 1.0,
            mc: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.perceptual, self.pd, self.mp, self.mc];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {self:?}")));
        }
        Ok(())
    }
}

fn difference(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::dim(format!(
            "loss operands {:?} vs {:?}",
            tape.shape(pred),
            tape.shape(target)
        )));
    }
    tape.sub(pred, target)
}

/// Mean absolute difference over every element.
pub fn l1_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let d = difference(tape, pred, target)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// Root of the mean squared difference over every element.
pub fn l2_mean(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let d = difference(tape, pred, target)?;
    let s = tape.square(d);
    let m = tape.mean(s);
    tape.sqrt(m)
}

/// Supervises the sRGB rendering of the clean-RAW head.
pub fn pd_loss(tape: &mut Tape, i_m_rgb: Var, gt_rgb: Var) -> Result<Var> {
    l2_mean(tape, i_m_rgb, gt_rgb)
}

/// Clean and moiré RAW estimates must add back up to the input.
pub fn mc_loss(tape: &mut Tape, i_cf_raw: Var, i_pm_raw: Var, i_raw: Var) -> Result<Var> {
    let sum = tape.add(i_cf_raw, i_pm_raw)?;
    l2_mean(tape, sum, i_raw)
}

/// Frozen, seeded stride-2 conv pyramid standing in for a pretrained
/// feature network.
#[derive(Clone, Debug)]
pub struct PerceptualNet {
    layers: Vec<(Tensor, Tensor)>,
}

impl PerceptualNet {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ci = 3;
        let layers = PERCEPTUAL_WIDTHS
            .iter()
            .map(|&co| {
                let w = he_uniform(&[3, 3, ci, co], 9 * ci, &mut rng);
                ci = co;
                (w, Tensor::zeros(&[co]))
            })
            .collect();
        PerceptualNet { layers }
    }

    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut y = x;
        for (w, b) in &self.layers {
            let wv = tape.leaf(w.clone());
            let bv = tape.leaf(b.clone());
            y = tape.conv2d_strided(y, wv, 2)?;
            y = tape.add_bias(y, bv)?;
            y = tape.gelu(y);
        }
        Ok(y)
    }

    /// Mean squared distance between final-layer features.
    pub fn loss(&self, tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
        if tape.shape(pred) != tape.shape(gt) {
            return Err(Error::dim("perceptual operands differ in shape"));
        }
        let fp = self.features(tape, pred)?;
        let fg = self.features(tape, gt)?;
        let d = tape.sub(fp, fg)?;
        let s = tape.square(d);
        Ok(tape.mean(s))
    }
}

impl Default for PerceptualNet {
    fn default() -> Self {
        PerceptualNet::new(PERCEPTUAL_SEED)
    }
}

/// Constant targets for one training triplet.
#[derive(Clone, Copy, Debug)]
pub struct Targets {
    /// `[2H, 2W, 3]` clean center frame.
    pub gt_center: Var,
    /// `[3, 2H, 2W, 3]` clean frames of the triplet.
    pub gt_frames: Var,
    /// `[3, H, W, 4]` moiré RAW input.
    pub raw: Var,
}

#[derive(Clone, Debug)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub grouping: GroupingParams,
    pub wnnm: WnnmParams,
    /// Frames of the moiré prediction that enter the low-rank prior.
    pub mp_frames: Vec<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            grouping: GroupingParams::default(),
            wnnm: WnnmParams::default(),
            mp_frames: vec![1],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossTerm {
    pub name: &'static str,
    pub raw: f64,
    pub weighted: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub terms: Vec<LossTerm>,
    pub total: f64,
}

impl LossReport {
    pub fn get(&self, name: &str) -> Option<&LossTerm> {
        self.terms.iter().find(|t| t.name == name)
    }
}

/// Stage 1: L1 plus weighted perceptual term. Stage 2 adds the weighted
/// decoupling losses, which need the decoupling outputs.
pub fn stage_losses(
    tape: &mut Tape,
    out: &MochaOutput,
    targets: &Targets,
    stage: Stage,
    cfg: &LossConfig,
    perceptual: &PerceptualNet,
) -> Result<(Var, LossReport)> {
    cfg.weights.validate()?;
    let w = cfg.weights;
    let mut parts: Vec<(&'static str, Var, f64)> = Vec::new();
    parts.push(("l1", l1_loss(tape, out.rgb, targets.gt_center)?, 1.0));
    parts.push(("perceptual", perceptual.loss(tape, out.rgb, targets.gt_center)?, w.perceptual));
    if stage == Stage::Two {
        let dm = out
            .dmad
            .ok_or_else(|| Error::usage("stage 2 losses need the decoupling outputs"))?;
        parts.push(("pd", pd_loss(tape, dm.ddb.i_m_rgb, targets.gt_frames)?, w.pd));
        let plan = MpPlan::build(tape.value(dm.ddb.i_pm_raw), &cfg.mp_frames, &cfg.grouping, &cfg.wnnm)?;
        parts.push(("mp", plan.loss(tape, dm.ddb.i_pm_raw)?, w.mp));
        parts.push(("mc", mc_loss(tape, dm.ddb.i_cf_raw, dm.ddb.i_pm_raw, targets.raw)?, w.mc));
    }
    let mut total: Option<Var> = None;
    let mut terms = Vec::with_capacity(parts.len());
    for (name, v, weight) in parts {
        let wv = tape.scale(v, weight);
        total = Some(match total {
            None => wv,
            Some(t) => tape.add(t, wv)?,
        });
        terms.push(LossTerm {
            name,
            raw: tape.value(v).item(),
            weighted: tape.value(wv).item(),
        });
    }
    let total = total.expect("at least one loss term");
    let tv = tape.value(total).item();
    if !tv.is_finite() {
        return Err(Error::Numerical(format!("loss is not finite: {tv}")));
    }
    Ok((total, LossReport { terms, total: tv }))
}
