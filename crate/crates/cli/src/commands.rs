//! Subcommand bodies. Each one is a pure function of its arguments, the
//! resolved configuration and the input files.

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use mocha_core::analysis::{amp_phase_swap, color_correlation, moire_prior, normalized_cc, raw_to_rgb, temporal_stats};
use mocha_core::gradsuite;
use mocha_core::io::{image, ndt, write_bytes};
use mocha_core::model::{check_params, Stage};
use mocha_core::synth::clip::{list_clip_dirs, load_clip, load_corpus, save_clip};
use mocha_core::synth::{generate_corpus, VideoClipPair};
use mocha_core::tensor::fft::fft2;
use mocha_core::train::trainer::{
    corpus_triplets, infer, read_checkpoint, train_stage1, train_stage2, write_checkpoint, StageRun,
};
use mocha_core::Tensor;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

pub fn synth(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let clips = generate_corpus(&cfg.synth, cfg.clips, cfg.synth_seed)?;
    let mut manifest = String::new();
    for (i, clip) in clips.iter().enumerate() {
        let name = format!("clip_{i:03}");
        save_clip(&out.join(&name), clip)?;
        let _ = writeln!(manifest, "clip.{i}={name}");
    }
    manifest.push_str(&cfg.render());
    write_bytes(&out.join("manifest.txt"), manifest.as_bytes())?;
    eprintln!("wrote {} clips to {}", clips.len(), out.display());
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum AnalyzeKind {
    Cc,
    Prior,
    Temporal,
    Swap,
}

enum Input {
    Clip(String, Box<VideoClipPair>),
    Tensor(String, Tensor),
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn gather_inputs(paths: &[PathBuf]) -> CliResult<Vec<Input>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let dirs = if p.join("manifest.txt").is_file() && p.join("moire_raw.ndt").is_file() {
                vec![p.clone()]
            } else {
                list_clip_dirs(p)?
            };
            if dirs.is_empty() {
                return Err(CliError::Usage(format!("no clips under {}", p.display())));
            }
            for d in dirs {
                out.push(Input::Clip(stem(&d), Box::new(load_clip(&d)?)));
            }
        } else {
            out.push(Input::Tensor(stem(p), ndt::read(p)?));
        }
    }
    Ok(out)
}

/// Frames of an image or clip tensor as `[H, W, C]` slices.
fn frames(t: &Tensor) -> CliResult<Vec<Tensor>> {
    match t.rank() {
        3 => Ok(vec![t.clone()]),
        4 => Ok((0..t.shape()[0]).map(|f| t.index_outer(f)).collect()),
        _ => Err(CliError::Usage(format!("expected an image or clip tensor, got {:?}", t.shape()))),
    }
}

fn as_rgb(frame: &Tensor) -> CliResult<Tensor> {
    match frame.shape().last() {
        Some(4) => Ok(raw_to_rgb(frame)?),
        _ => Ok(frame.clone()),
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs);
    (m, xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64)
}

fn prior_patch(cfg: &RunConfig, frame: &Tensor) -> usize {
    let side = frame.shape()[0].min(frame.shape()[1]);
    if cfg.prior_patch == 0 {
        side
    } else {
        cfg.prior_patch.min(side)
    }
}

struct Csv(String);

impl Csv {
    fn new() -> Self {
        Csv("clip_id,metric,value\n".into())
    }

    fn row(&mut self, id: &str, metric: &str, value: f64) {
        let _ = writeln!(self.0, "{id},{metric},{value:?}");
    }
}

fn pooled_prior(cfg: &RunConfig, clip: &Tensor, maps: Option<(&Path, &str)>) -> CliResult<(f64, f64)> {
    let mut vals = Vec::new();
    for (f, frame) in frames(clip)?.iter().enumerate() {
        let rgb = as_rgb(frame)?;
        let report = moire_prior(&rgb, prior_patch(cfg, &rgb))?;
        if let Some((dir, tag)) = maps {
            image::write_pfm(&dir.join(format!("{tag}_prior_{f:02}.pfm")), &report.per_patch)?;
        }
        vals.extend_from_slice(report.per_patch.data());
    }
    Ok(mean_var(&vals))
}

/// Channel-mean absolute amplitude difference between adjacent frames.
fn amplitude_maps(clip: &Tensor, dir: &Path, tag: &str) -> CliResult<()> {
    let amps: Vec<Tensor> = frames(clip)?
        .iter()
        .map(|f| fft2(f).map(|s| s.amplitude()))
        .collect::<Result<_, _>>()?;
    for (i, pair) in amps.windows(2).enumerate() {
        let &[h, w, c] = pair[0].shape() else { unreachable!() };
        let map = Tensor::from_fn(&[h, w], |ix| {
            (0..c).map(|k| (pair[1].at(&[ix[0], ix[1], k]) - pair[0].at(&[ix[0], ix[1], k])).abs()).sum::<f64>() / c as f64
        });
        image::write_pfm(&dir.join(format!("{tag}_ampdiff_{i:02}.pfm")), &map)?;
    }
    Ok(())
}

pub fn analyze(
    cfg: &RunConfig,
    kind: AnalyzeKind,
    paths: &[PathBuf],
    csv_path: Option<&Path>,
    out_dir: Option<&Path>,
) -> CliResult<()> {
    let mut csv = Csv::new();
    if kind == AnalyzeKind::Swap {
        swap(paths, out_dir, &mut csv)?;
    } else {
        for input in gather_inputs(paths)? {
            match (kind, input) {
                (AnalyzeKind::Cc, Input::Clip(id, c)) => {
                    let (mut srgb, mut raw) = (Vec::new(), Vec::new());
                    for f in 0..c.frames() {
                        srgb.push(normalized_cc(&c.moire_rgb.index_outer(f), &c.clean_rgb.index_outer(f))?);
                        let m = raw_to_rgb(&c.moire_raw.index_outer(f))?;
                        let p = raw_to_rgb(&c.pseudo_clean_raw.index_outer(f))?;
                        raw.push(normalized_cc(&m, &p)?);
                    }
                    csv.row(&id, "ncc_srgb", mean(&srgb));
                    csv.row(&id, "ncc_raw", mean(&raw));
                }
                (AnalyzeKind::Cc, Input::Tensor(id, t)) => {
                    let cc: Vec<f64> = frames(&t)?
                        .iter()
                        .map(|f| Ok(color_correlation(&as_rgb(f)?)?))
                        .collect::<CliResult<_>>()?;
                    csv.row(&id, "cc", mean(&cc));
                }
                (AnalyzeKind::Prior, Input::Clip(id, c)) => {
                    let tag = format!("{id}_moire");
                    let (mm, mv) = pooled_prior(cfg, &c.moire_rgb, out_dir.map(|d| (d, tag.as_str())))?;
                    let (cm, cv) = pooled_prior(cfg, &c.clean_rgb, None)?;
                    csv.row(&id, "prior_mean_moire", mm);
                    csv.row(&id, "prior_var_moire", mv);
                    csv.row(&id, "prior_mean_clean", cm);
                    csv.row(&id, "prior_var_clean", cv);
                }
                (AnalyzeKind::Prior, Input::Tensor(id, t)) => {
                    let (m, v) = pooled_prior(cfg, &t, out_dir.map(|d| (d, id.as_str())))?;
                    csv.row(&id, "prior_mean", m);
                    csv.row(&id, "prior_var", v);
                }
                (AnalyzeKind::Temporal, Input::Clip(id, c)) => {
                    let pairs = [
                        ("moire", &c.moire_rgb),
                        ("clean", &c.clean_rgb),
                        ("moire_raw", &c.moire_raw),
                        ("clean_raw", &c.pseudo_clean_raw),
                    ];
                    for (tag, t) in pairs {
                        let r = temporal_stats(t)?;
                        csv.row(&id, &format!("temporal_mean_{tag}"), r.mean);
                        csv.row(&id, &format!("temporal_var_{tag}"), r.variance);
                    }
                    if let Some(d) = out_dir {
                        amplitude_maps(&c.moire_rgb, d, &format!("{id}_moire"))?;
                    }
                }
                (AnalyzeKind::Temporal, Input::Tensor(id, t)) => {
                    let r = temporal_stats(&t)?;
                    csv.row(&id, "temporal_mean", r.mean);
                    csv.row(&id, "temporal_var", r.variance);
                    if let Some(d) = out_dir {
                        amplitude_maps(&t, d, &id)?;
                    }
                }
                (AnalyzeKind::Swap, _) => unreachable!(),
            }
        }
    }
    match csv_path {
        Some(p) => write_bytes(p, csv.0.as_bytes())?,
        None => std::io::stdout()
            .write_all(csv.0.as_bytes())
            .map_err(|e| CliError::Io("stdout".into(), e))?,
    }
    Ok(())
}

fn swap(paths: &[PathBuf], out_dir: Option<&Path>, csv: &mut Csv) -> CliResult<()> {
    let [a, b] = paths else {
        return Err(CliError::Usage(format!("swap takes two tensors, got {}", paths.len())));
    };
    let dir = out_dir.ok_or_else(|| CliError::Usage("swap needs --out-dir for the reconstructions".into()))?;
    let (ta, tb) = (ndt::read(a)?, ndt::read(b)?);
    let (ab, ba) = amp_phase_swap(&ta, &tb)?;
    for (name, t) in [("swap_a", &ab), ("swap_b", &ba)] {
        ndt::write(&dir.join(format!("{name}.ndt")), t, ndt::DType::F64)?;
        if matches!(t.shape(), [_, _, 1] | [_, _, 3]) {
            image::write_pfm(&dir.join(format!("{name}.pfm")), t)?;
        }
    }
    csv.row(&stem(a), "swap_max_abs_change", ab.max_abs_diff(&ta));
    csv.row(&stem(b), "swap_max_abs_change", ba.max_abs_diff(&tb));
    Ok(())
}

pub struct TrainArgs<'a> {
    pub stage: Stage,
    pub corpus: &'a Path,
    pub out: &'a Path,
    pub from: Option<&'a Path>,
    pub holdout: Option<&'a Path>,
}

pub fn train(cfg: &RunConfig, args: &TrainArgs) -> CliResult<()> {
    let init = match (args.stage, args.from) {
        (Stage::One, Some(_)) => return Err(CliError::Usage("stage 1 starts from scratch; drop --from".into())),
        (Stage::Two, None) => return Err(CliError::Usage("stage 2 requires --from <stage1 weights>".into())),
        (Stage::Two, Some(p)) => {
            let (store, manifest) = read_checkpoint(p)?;
            if let Some(m) = manifest.filter(|m| m.stage != 1) {
                return Err(CliError::Usage(format!("{} is a stage-{} checkpoint", p.display(), m.stage)));
            }
            Some(store)
        }
        (Stage::One, None) => None,
    };
    let train_set = corpus_triplets(&load_corpus(args.corpus)?)?;
    let holdout = match args.holdout {
        Some(d) => corpus_triplets(&load_corpus(d)?)?,
        None => train_set.clone(),
    };
    let tc = &cfg.train;
    let run: StageRun = match init {
        None => train_stage1(&train_set, &holdout, tc)?,
        Some(store) => train_stage2(&store, &train_set, &holdout, tc)?,
    };
    if let Some(e) = run.log.iter().find(|e| !e.total.is_finite()) {
        return Err(CliError::Core(mocha_core::Error::Numerical(format!(
            "loss diverged at epoch {}",
            e.epoch
        ))));
    }
    let params = write_checkpoint(args.out, &run, tc)?;
    write_bytes(&args.out.join(format!("stage{}.config", args.stage.number())), cfg.render().as_bytes())?;
    for e in &run.log {
        eprintln!("stage {} epoch {:>3} loss {:.6} psnr {:.4}", args.stage.number(), e.epoch, e.total, e.psnr);
    }
    eprintln!("wrote {}", params.display());
    Ok(())
}

pub fn infer_cmd(cfg: &RunConfig, weights: &Path, input: &Path, out: &Path, stage: Option<Stage>, center: usize) -> CliResult<()> {
    let (store, manifest) = read_checkpoint(weights)?;
    check_params(&store, &cfg.train.model)?;
    let stage = match (stage, manifest) {
        (Some(s), _) => s,
        (None, Some(m)) => Stage::from_number(m.stage)?,
        (None, None) => Stage::Two,
    };
    let raw = ndt::read(input)?;
    let &[t, _, _, 4] = raw.shape() else {
        return Err(CliError::Usage(format!("input must be packed RAW [T,H,W,4], got {:?}", raw.shape())));
    };
    let raw = if t == 3 {
        raw
    } else {
        if center == 0 || center + 1 >= t {
            return Err(CliError::Usage(format!("center frame {center} needs neighbours in a {t}-frame clip")));
        }
        Tensor::stack(&[raw.index_outer(center - 1), raw.index_outer(center), raw.index_outer(center + 1)])?
    };
    let rgb = infer(&store, &cfg.train.model, stage, &raw)?;
    rgb.check_finite()?;
    ndt::write(&out.join("output.ndt"), &rgb, ndt::DType::F64)?;
    image::write_ppm(&out.join("output.ppm"), &rgb)?;
    image::write_pfm(&out.join("output.pfm"), &rgb)?;
    eprintln!("wrote {:?} output to {}", rgb.shape(), out.display());
    Ok(())
}

pub fn gradcheck(seed: u64, rows: &[String]) -> CliResult<()> {
    let names: Vec<&'static str> = if rows.is_empty() {
        gradsuite::ROWS.to_vec()
    } else {
        rows.iter()
            .map(|r| {
                gradsuite::ROWS
                    .iter()
                    .copied()
                    .find(|n| n == r)
                    .ok_or_else(|| CliError::Usage(format!("unknown row {r:?}; known: {}", gradsuite::ROWS.join(", "))))
            })
            .collect::<CliResult<_>>()?
    };
    println!("{:<18} {:>12} {:>8} {:>7}  result", "block", "max_rel_err", "tol", "checks");
    let mut failed = Vec::new();
    for name in names {
        let index = gradsuite::ROWS.iter().position(|n| *n == name).unwrap_or(0);
        let row = gradsuite::run_row(name, seed.wrapping_add(index as u64))?;
        let verdict = if row.pass() { "PASS" } else { "FAIL" };
        println!(
            "{:<18} {:>12.3e} {:>8.0e} {:>7}  {verdict}",
            row.name, row.report.max_rel_err, row.tol, row.report.checks
        );
        if !row.pass() {
            failed.push(row.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!("gradient check failed for {}", failed.join(", "))))
    }
}
