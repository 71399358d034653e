//! Two-stage training: the refinement path alone, then joint training with
//! moiré decoupling under separate optimizers. Checkpoints, per-epoch CSV
//! logs and held-out PSNR.

use super::losses::{stage_losses, LossConfig, LossReport, PerceptualNet, Targets};
use super::optim::AdamW;
use crate::autodiff::{Ctx, Tape};
use crate::error::{Error, Result};
use crate::io::{read_bytes, store as store_io, write_bytes};
use crate::model::{init_params, mocha_forward, ModelConfig, Stage};
use crate::params::ParamStore;
use crate::synth::VideoClipPair;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// How the stage-2 refinement learning rate is read: the 1/10 scale on top
/// of the lowered base rate, or the two being the same reduction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StadLr {
    Compose,
    Coincide,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub lr_dmad: f64,
    pub stad_scale: f64,
    pub stad_lr: StadLr,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::desk(),
            loss: LossConfig::default(),
            epochs_stage1: 30,
            epochs_stage2: 30,
            lr_stage1: 1e-4,
            lr_stage2: 1e-5,
            lr_dmad: 1e-4,
            stad_scale: 0.1,
            stad_lr: StadLr::Compose,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Canonical text form; hashed into checkpoint manifests.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.model.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        let w = &self.loss.weights;
        let g = &self.loss.grouping;
        let _ = writeln!(
            s,
            "weights={:?},{:?},{:?},{:?}\ngrouping={},{},{},{},{}\nwnnm={:?},{:?}\nmp_frames={:?}",
            w.perceptual, w.pd, w.mp, w.mc, g.patch, g.stride, g.k, g.search, g.max_groups,
            self.loss.wnnm.c_w, self.loss.wnnm.eps, self.loss.mp_frames
        );
        let _ = writeln!(
            s,
            "epochs={},{}\nlr={:?},{:?},{:?}\nstad_scale={:?}\nstad_lr={:?}\nweight_decay={:?}\nseed={}",
            self.epochs_stage1,
            self.epochs_stage2,
            self.lr_stage1,
            self.lr_stage2,
            self.lr_dmad,
            self.stad_scale,
            self.stad_lr,
            self.weight_decay,
            self.seed
        );
        s
    }

    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn stad_lr_scale(&self) -> f64 {
        match self.stad_lr {
            StadLr::Compose => self.stad_scale,
            StadLr::Coincide => 1.0,
        }
    }
}

/// One training sample: three consecutive frames and their targets.
#[derive(Clone, Debug)]
pub struct Triplet {
    pub raw: Tensor,
    pub gt_frames: Tensor,
    pub gt_center: Tensor,
}

fn frames(t: &Tensor, start: usize, n: usize) -> Result<Tensor> {
    Tensor::stack(&(start..start + n).map(|i| t.index_outer(i)).collect::<Vec<_>>())
}

/// Every window of three consecutive frames of a clip.
pub fn triplets(clip: &VideoClipPair) -> Result<Vec<Triplet>> {
    let t = clip.frames();
    if t < 3 {
        return Err(Error::dim(format!("clips need at least 3 frames, got {t}")));
    }
    (0..t - 2)
        .map(|s| {
            Ok(Triplet {
                raw: frames(&clip.moire_raw, s, 3)?,
                gt_frames: frames(&clip.clean_rgb, s, 3)?,
                gt_center: clip.clean_rgb.index_outer(s + 1),
            })
        })
        .collect()
}

pub fn corpus_triplets(clips: &[VideoClipPair]) -> Result<Vec<Triplet>> {
    let mut out = Vec::new();
    for c in clips {
        out.extend(triplets(c)?);
    }
    Ok(out)
}

/// Forward pass without recording gradients beyond the tape.
pub fn infer(store: &ParamStore, cfg: &ModelConfig, stage: Stage, raw: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, store);
    let x = ctx.input(raw.clone());
    let out = mocha_forward(&mut ctx, x, cfg, stage)?;
    Ok(ctx.value(out.rgb).clone())
}

pub fn psnr(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.expect_same_shape(target)?;
    let mse = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p.clamp(0.0, 1.0) - t).powi(2))
        .sum::<f64>()
        / pred.numel() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Mean PSNR of the clamped center-frame estimate over `set`.
pub fn mean_psnr(store: &ParamStore, cfg: &ModelConfig, stage: Stage, set: &[Triplet]) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::usage("PSNR needs at least one held-out triplet"));
    }
    let mut total = 0.0;
    for t in set {
        total += psnr(&infer(store, cfg, stage, &t.raw)?, &t.gt_center)?;
    }
    Ok(total / set.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Per-term means over the epoch's steps, then `total`.
    pub terms: Vec<(String, f64)>,
    pub total: f64,
    pub psnr: f64,
}

impl EpochLog {
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for (name, v) in &self.terms {
            let _ = writeln!(s, "{},{name},{v:?}", self.epoch);
        }
        let _ = writeln!(s, "{},total,{:?}", self.epoch, self.total);
        let _ = writeln!(s, "{},psnr,{:?}", self.epoch, self.psnr);
        s
    }
}

pub fn csv_log(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,term,value\n");
    for e in log {
        s.push_str(&e.csv_rows());
    }
    s
}

#[derive(Clone, Debug)]
pub struct StageRun {
    pub stage: Stage,
    pub store: ParamStore,
    pub log: Vec<EpochLog>,
}

impl StageRun {
    pub fn final_psnr(&self) -> f64 {
        self.log.last().map_or(f64::NAN, |e| e.psnr)
    }
}

struct Optimizers {
    main: AdamW,
    dmad: Option<AdamW>,
}

fn step(
    store: &mut ParamStore,
    opts: &mut Optimizers,
    sample: &Triplet,
    stage: Stage,
    cfg: &TrainConfig,
    perceptual: &PerceptualNet,
) -> Result<LossReport> {
    let (report, grads) = {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, store);
        let raw = ctx.input(sample.raw.clone());
        let targets = Targets {
            gt_center: ctx.input(sample.gt_center.clone()),
            gt_frames: ctx.input(sample.gt_frames.clone()),
            raw,
        };
        let out = mocha_forward(&mut ctx, raw, &cfg.model, stage)?;
        let (loss, report) = stage_losses(&mut ctx, &out, &targets, stage, &cfg.loss, perceptual)?;
        let g = ctx.backward(loss)?;
        let per_param = ctx.param_grads(&g);
        let names: Vec<String> = store.names().map(str::to_string).collect();
        let grads: std::collections::HashMap<String, Tensor> = names
            .into_iter()
            .zip(per_param)
            .filter_map(|(n, g)| g.map(|g| (n, g)))
            .collect();
        (report, grads)
    };
    for g in grads.values() {
        g.check_finite()
            .map_err(|_| Error::Numerical("non-finite gradient".into()))?;
    }
    let main = super::optim::aligned_grads(&opts.main, |n| grads.get(n).cloned());
    opts.main.update(store, &main)?;
    if let Some(d) = opts.dmad.as_mut() {
        let dg = super::optim::aligned_grads(d, |n| grads.get(n).cloned());
        d.update(store, &dg)?;
    }
    Ok(report)
}

fn epoch_rng(seed: u64, stage: Stage, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ ((stage.number() as u64) << 56) ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn run_epochs(
    mut store: ParamStore,
    mut opts: Optimizers,
    stage: Stage,
    epochs: usize,
    train: &[Triplet],
    holdout: &[Triplet],
    cfg: &TrainConfig,
) -> Result<StageRun> {
    if train.is_empty() {
        return Err(Error::usage("training needs at least one triplet"));
    }
    let perceptual = PerceptualNet::default();
    let mut log = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, stage, epoch));
        let mut sums: Vec<(String, f64)> = Vec::new();
        let mut total = 0.0;
        for &i in &order {
            let r = step(&mut store, &mut opts, &train[i], stage, cfg, &perceptual)?;
            if sums.is_empty() {
                sums = r.terms.iter().map(|t| (t.name.to_string(), 0.0)).collect();
            }
            for (s, t) in sums.iter_mut().zip(&r.terms) {
                s.1 += t.weighted;
            }
            total += r.total;
        }
        let n = order.len() as f64;
        sums.iter_mut().for_each(|s| s.1 /= n);
        let psnr = mean_psnr(&store, &cfg.model, stage, holdout)?;
        log.push(EpochLog {
            epoch,
            terms: sums,
            total: total / n,
            psnr,
        });
    }
    Ok(StageRun { stage, store, log })
}

/// Stage 1: shallow features, refinement stack and output head at the
/// stage-1 rate; decoupling parameters are not optimized.
pub fn train_stage1(train: &[Triplet], holdout: &[Triplet], cfg: &TrainConfig) -> Result<StageRun> {
    let store = init_params(&cfg.model, cfg.seed)?;
    let opts = Optimizers {
        main: AdamW::new(&store, |n| !n.starts_with("dmad."), cfg.lr_stage1, cfg.weight_decay),
        dmad: None,
    };
    run_epochs(store, opts, Stage::One, cfg.epochs_stage1, train, holdout, cfg)
}

/// Stage 2 from stage-1 weights: lowered base rate for the main path, an
/// extra scale on the refinement stack, a separate optimizer for
/// decoupling.
pub fn train_stage2(stage1: &ParamStore, train: &[Triplet], holdout: &[Triplet], cfg: &TrainConfig) -> Result<StageRun> {
    crate::model::check_params(stage1, &cfg.model)?;
    let mut store = stage1.clone();
    let scale = cfg.stad_lr_scale();
    let stad: Vec<String> = store.names().filter(|n| n.starts_with("stad.")).map(str::to_string).collect();
    for n in stad {
        store.set_lr_scale(&n, scale)?;
    }
    let opts = Optimizers {
        main: AdamW::new(&store, |n| !n.starts_with("dmad."), cfg.lr_stage2, cfg.weight_decay),
        dmad: Some(AdamW::new(&store, |n| n.starts_with("dmad."), cfg.lr_dmad, cfg.weight_decay)),
    };
    run_epochs(store, opts, Stage::Two, cfg.epochs_stage2, train, holdout, cfg)
}

#[derive(Clone, Debug)]
pub struct TwoStageRun {
    pub stage1: StageRun,
    pub stage2: StageRun,
}

pub fn train_two_stage(train: &[Triplet], holdout: &[Triplet], cfg: &TrainConfig) -> Result<TwoStageRun> {
    let stage1 = train_stage1(train, holdout, cfg)?;
    let stage2 = train_stage2(&stage1.store, train, holdout, cfg)?;
    Ok(TwoStageRun { stage1, stage2 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointManifest {
    pub stage: u32,
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
}

impl CheckpointManifest {
    pub fn encode(&self) -> String {
        format!(
            "stage={}\nepoch={}\nseed={}\nconfig_hash={}\n",
            self.stage, self.epoch, self.seed, self.config_hash
        )
    }

    pub fn decode(text: &str) -> Result<Self> {
        let mut kv = std::collections::HashMap::new();
        let mut offset = 0u64;
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                kv.insert(k.trim(), v.trim());
            } else if !line.trim().is_empty() {
                return Err(Error::Format {
                    offset,
                    msg: format!("manifest line without '=': {line:?}"),
                });
            }
            offset += line.len() as u64 + 1;
        }
        let get = |k: &str| {
            kv.get(k).copied().ok_or_else(|| Error::Format {
                offset: 0,
                msg: format!("manifest lacks {k}"),
            })
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?.parse().map_err(|_| Error::Format {
                offset: 0,
                msg: format!("manifest {k} is not an integer"),
            })
        };
        Ok(CheckpointManifest {
            stage: num("stage")? as u32,
            epoch: num("epoch")? as usize,
            seed: num("seed")?,
            config_hash: get("config_hash")?.to_string(),
        })
    }
}

/// Paths of the weights and manifest for a checkpoint stem.
pub fn checkpoint_paths(dir: &Path, stage: Stage) -> (PathBuf, PathBuf) {
    let n = stage.number();
    (dir.join(format!("stage{n}.params")), dir.join(format!("stage{n}.manifest")))
}

pub fn write_checkpoint(dir: &Path, run: &StageRun, cfg: &TrainConfig) -> Result<PathBuf> {
    let (params, manifest) = checkpoint_paths(dir, run.stage);
    store_io::write(&params, &run.store)?;
    let m = CheckpointManifest {
        stage: run.stage.number(),
        epoch: run.log.len(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
    };
    write_bytes(&manifest, m.encode().as_bytes())?;
    write_bytes(&dir.join(format!("stage{}.csv", run.stage.number())), csv_log(&run.log).as_bytes())?;
    Ok(params)
}

/// Loads weights and, if present next to them, the manifest.
pub fn read_checkpoint(params: &Path) -> Result<(ParamStore, Option<CheckpointManifest>)> {
    if !params.exists() {
        return Err(Error::usage(format!("checkpoint {} does not exist", params.display())));
    }
    let store = store_io::read(params)?;
    let manifest_path = params.with_extension("manifest");
    let manifest = if manifest_path.exists() {
        let text = String::from_utf8(read_bytes(&manifest_path)?).map_err(|e| Error::Format {
            offset: e.utf8_error().valid_up_to() as u64,
            msg: "manifest is not UTF-8".into(),
        })?;
        Some(CheckpointManifest::decode(&text)?)
    } else {
        None
    };
    Ok((store, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrip() {
        let m = CheckpointManifest {
            stage: 2,
            epoch: 30,
            seed: 9,
            config_hash: "abc".into(),
        };
        assert_eq!(CheckpointManifest::decode(&m.encode()).unwrap(), m);
        assert!(matches!(CheckpointManifest::decode("stage=1\n"), Err(Error::Format { .. })));
    }

    #[test]
    fn hash_tracks_config() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn psnr_of_exact_prediction_is_infinite() {
        let t = Tensor::filled(&[2, 2, 3], 0.5);
        assert_eq!(psnr(&t, &t).unwrap(), f64::INFINITY);
        let u = Tensor::filled(&[2, 2, 3], 0.6);
        assert!((psnr(&u, &t).unwrap() - 20.0).abs() < 1e-9);
    }

    use crate::synth::clip::{generate_corpus, SynthConfig};

    fn tiny() -> (Vec<Triplet>, Vec<Triplet>, TrainConfig) {
        let sc = SynthConfig {
            frames: 3,
            raw_h: 16,
            raw_w: 16,
            ..Default::default()
        };
        let train = corpus_triplets(&generate_corpus(&sc, 2, 3).unwrap()).unwrap();
        let hold = corpus_triplets(&generate_corpus(&sc, 1, 4).unwrap()).unwrap();
        let cfg = TrainConfig {
            model: ModelConfig {
                channels: 8,
                n_m: 1,
                n_r: 1,
                n_s: 1,
                heads: 2,
                ..ModelConfig::default()
            },
            epochs_stage1: 1,
            epochs_stage2: 1,
            ..Default::default()
        };
        (train, hold, cfg)
    }

    #[test]
    fn triplets_slide_over_the_clip() {
        let sc = SynthConfig {
            frames: 5,
            raw_h: 8,
            raw_w: 8,
            ..Default::default()
        };
        let clip = &generate_corpus(&sc, 1, 1).unwrap()[0];
        let ts = triplets(clip).unwrap();
        assert_eq!(ts.len(), 3);
        assert_eq!(ts[1].raw.shape(), &[3, 8, 8, 4]);
        assert_eq!(ts[1].gt_frames.shape(), &[3, 16, 16, 3]);
        assert_eq!(ts[1].gt_center, ts[1].gt_frames.index_outer(1));
        assert_eq!(ts[1].gt_frames.index_outer(0), ts[0].gt_frames.index_outer(1));
    }

    #[test]
    fn stage_one_leaves_decoupling_untouched_and_two_moves_it() {
        let (train, hold, cfg) = tiny();
        let init = init_params(&cfg.model, cfg.seed).unwrap();
        let s1 = train_stage1(&train, &hold, &cfg).unwrap();
        for (name, p) in init.iter() {
            let after = s1.store.value(name).unwrap();
            if name.starts_with("dmad.") {
                assert_eq!(&p.value, after, "{name}");
            }
        }
        assert_ne!(init.value("sfe.w").unwrap(), s1.store.value("sfe.w").unwrap());
        assert_eq!(s1.log.len(), 1);
        assert_eq!(s1.log[0].terms.len(), 2);
        let s2 = train_stage2(&s1.store, &train, &hold, &cfg).unwrap();
        assert_ne!(s1.store.value("dmad.mcb.q.pw.w").unwrap(), s2.store.value("dmad.mcb.q.pw.w").unwrap());
        assert_eq!(s2.store.lr_scale("stad.conv.w"), Some(0.1));
        assert_eq!(s2.store.lr_scale("sfe.w"), Some(1.0));
        assert_eq!(s2.log[0].terms.len(), 5);
    }

    #[test]
    fn training_is_reproducible() {
        let (train, hold, cfg) = tiny();
        let a = train_stage1(&train, &hold, &cfg).unwrap();
        let b = train_stage1(&train, &hold, &cfg).unwrap();
        assert_eq!(csv_log(&a.log), csv_log(&b.log));
        assert!(a.store.iter().zip(b.store.iter()).all(|(x, y)| x.1.value == y.1.value));
    }

    #[test]
    fn checkpoints_roundtrip_with_manifest_and_log() {
        let (train, hold, cfg) = tiny();
        let run = train_stage1(&train, &hold, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = write_checkpoint(dir.path(), &run, &cfg).unwrap();
        let (store, manifest) = read_checkpoint(&path).unwrap();
        let m = manifest.unwrap();
        assert_eq!((m.stage, m.epoch, m.seed), (1, 1, 0));
        assert_eq!(m.config_hash, cfg.hash());
        assert!(store.iter().zip(run.store.iter()).all(|(x, y)| x.0 == y.0 && x.1.value == y.1.value));
        let csv = std::fs::read_to_string(dir.path().join("stage1.csv")).unwrap();
        assert!(csv.starts_with("epoch,term,value\n1,l1,"));
        assert!(matches!(read_checkpoint(&dir.path().join("missing.params")), Err(Error::Usage(_))));
    }

    #[test]
    fn stage_two_rejects_weights_for_another_config() {
        let (train, hold, cfg) = tiny();
        let other = init_params(&ModelConfig::desk(), 0).unwrap();
        assert!(matches!(train_stage2(&other, &train, &hold, &cfg), Err(Error::Config(_))));
    }
}
