//! Line-oriented `key = value` run configuration.
//!
//! Keys are namespaced (`model.`, `loss.`, `train.`, `synth.`,
//! `analyze.`); anything else is rejected.

use crate::error::{CliError, CliResult};
use mocha_core::model::ModelConfig;
use mocha_core::synth::SynthConfig;
use mocha_core::train::trainer::{StadLr, TrainConfig};
use std::path::Path;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub clips: usize,
    pub synth_seed: u64,
    /// Prior patch side in sRGB pixels; 0 uses the whole frame.
    pub prior_patch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            clips: 8,
            synth_seed: 0,
            prior_patch: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> CliResult<T> {
    value
        .trim()
        .parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> CliResult<Vec<usize>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let t = &mut self.train;
        let l = &mut t.loss;
        let s = &mut self.synth;
        match key {
            _ if key.starts_with("model.") => {
                let k = &key["model.".len()..];
                if !ModelConfig::KEYS.contains(&k) {
                    return Err(CliError::Config(format!("unknown key {key:?}")));
                }
                t.model.set(k, value)?;
            }
            "loss.perceptual" => l.weights.perceptual = parse(key, value)?,
            "loss.pd" => l.weights.pd = parse(key, value)?,
            "loss.mp" => l.weights.mp = parse(key, value)?,
            "loss.mc" => l.weights.mc = parse(key, value)?,
            "loss.patch" => l.grouping.patch = parse(key, value)?,
            "loss.stride" => l.grouping.stride = parse(key, value)?,
            "loss.k" => l.grouping.k = parse(key, value)?,
            "loss.search" => l.grouping.search = parse(key, value)?,
            "loss.max_groups" => l.grouping.max_groups = parse(key, value)?,
            "loss.c_w" => l.wnnm.c_w = parse(key, value)?,
            "loss.eps" => l.wnnm.eps = parse(key, value)?,
            "loss.mp_frames" => l.mp_frames = parse_list(key, value)?,
            "train.epochs_stage1" => t.epochs_stage1 = parse(key, value)?,
            "train.epochs_stage2" => t.epochs_stage2 = parse(key, value)?,
            "train.lr_stage1" => t.lr_stage1 = parse(key, value)?,
            "train.lr_stage2" => t.lr_stage2 = parse(key, value)?,
            "train.lr_dmad" => t.lr_dmad = parse(key, value)?,
            "train.stad_scale" => t.stad_scale = parse(key, value)?,
            "train.stad_lr" => {
                t.stad_lr = match value.trim() {
                    "compose" => StadLr::Compose,
                    "coincide" => StadLr::Coincide,
                    v => return Err(CliError::Config(format!("{key}: expected compose or coincide, got {v:?}"))),
                }
            }
            "train.weight_decay" => t.weight_decay = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "synth.clips" => self.clips = parse(key, value)?,
            "synth.seed" => self.synth_seed = parse(key, value)?,
            "synth.frames" => s.frames = parse(key, value)?,
            "synth.raw_h" => s.raw_h = parse(key, value)?,
            "synth.raw_w" => s.raw_w = parse(key, value)?,
            "synth.pitch" => s.pitch = parse(key, value)?,
            "synth.samples" => s.samples = parse(key, value)?,
            "synth.scale_min" => s.scale_range.0 = parse(key, value)?,
            "synth.scale_max" => s.scale_range.1 = parse(key, value)?,
            "synth.jitter_translation" => s.jitter_translation = parse(key, value)?,
            "synth.jitter_rotation" => s.jitter_rotation = parse(key, value)?,
            "synth.wb_r" => s.isp.wb_gains[0] = parse(key, value)?,
            "synth.wb_g" => s.isp.wb_gains[1] = parse(key, value)?,
            "synth.wb_b" => s.isp.wb_gains[2] = parse(key, value)?,
            "synth.sharpen" => s.isp.sharpen = parse(key, value)?,
            "analyze.patch" => self.prior_patch = parse(key, value)?,
            _ => return Err(CliError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override as given on the command line.
    pub fn apply(&mut self, assignment: &str) -> CliResult<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("expected key=value, got {assignment:?}")))?;
        self.set(k.trim(), v)
    }

    pub fn parse_text(&mut self, text: &str) -> CliResult<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
            self.set(k.trim(), v).map_err(|e| CliError::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.display().to_string(), e))?;
        let mut cfg = RunConfig::default();
        cfg.parse_text(&text)?;
        Ok(cfg)
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let t = &self.train;
        let l = &t.loss;
        let s = &self.synth;
        let mut out: Vec<(String, String)> = t
            .model
            .entries()
            .into_iter()
            .map(|(k, v)| (format!("model.{k}"), v.to_string()))
            .collect();
        let frames: Vec<String> = l.mp_frames.iter().map(usize::to_string).collect();
        let stad_lr = match t.stad_lr {
            StadLr::Compose => "compose",
            StadLr::Coincide => "coincide",
        };
        let rest: [(&str, String); 37] = [
            ("loss.perceptual", format!("{:?}", l.weights.perceptual)),
            ("loss.pd", format!("{:?}", l.weights.pd)),
            ("loss.mp", format!("{:?}", l.weights.mp)),
            ("loss.mc", format!("{:?}", l.weights.mc)),
            ("loss.patch", l.grouping.patch.to_string()),
            ("loss.stride", l.grouping.stride.to_string()),
            ("loss.k", l.grouping.k.to_string()),
            ("loss.search", l.grouping.search.to_string()),
            ("loss.max_groups", l.grouping.max_groups.to_string()),
            ("loss.c_w", format!("{:?}", l.wnnm.c_w)),
            ("loss.eps", format!("{:?}", l.wnnm.eps)),
            ("loss.mp_frames", frames.join(",")),
            ("train.epochs_stage1", t.epochs_stage1.to_string()),
            ("train.epochs_stage2", t.epochs_stage2.to_string()),
            ("train.lr_stage1", format!("{:?}", t.lr_stage1)),
            ("train.lr_stage2", format!("{:?}", t.lr_stage2)),
            ("train.lr_dmad", format!("{:?}", t.lr_dmad)),
            ("train.stad_scale", format!("{:?}", t.stad_scale)),
            ("train.stad_lr", stad_lr.to_string()),
            ("train.weight_decay", format!("{:?}", t.weight_decay)),
            ("train.seed", t.seed.to_string()),
            ("synth.clips", self.clips.to_string()),
            ("synth.seed", self.synth_seed.to_string()),
            ("synth.frames", s.frames.to_string()),
            ("synth.raw_h", s.raw_h.to_string()),
            ("synth.raw_w", s.raw_w.to_string()),
            ("synth.pitch", s.pitch.to_string()),
            ("synth.samples", s.samples.to_string()),
            ("synth.scale_min", format!("{:?}", s.scale_range.0)),
            ("synth.scale_max", format!("{:?}", s.scale_range.1)),
            ("synth.jitter_translation", format!("{:?}", s.jitter_translation)),
            ("synth.jitter_rotation", format!("{:?}", s.jitter_rotation)),
            ("synth.wb_r", format!("{:?}", s.isp.wb_gains[0])),
            ("synth.wb_g", format!("{:?}", s.isp.wb_gains[1])),
            ("synth.wb_b", format!("{:?}", s.isp.wb_gains[2])),
            ("synth.sharpen", format!("{:?}", s.isp.sharpen)),
            ("analyze.patch", self.prior_patch.to_string()),
        ];
        out.extend(rest.into_iter().map(|(k, v)| (k.to_string(), v)));
        out
    }

    pub fn render(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
