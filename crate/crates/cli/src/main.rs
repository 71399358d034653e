//! `mocha`: corpus synthesis, moiré statistics, two-stage training,
//! inference and the gradient-check suite.
//!
//! Exit codes: 0 success, 1 usage, 2 format, 3 numerical.
//! `MOCHA_THREADS` sizes the worker pool (default 1).

mod commands;
mod config;
mod error;

use clap::{Parser, Subcommand};
use commands::{AnalyzeKind, TrainArgs};
use config::RunConfig;
use error::{CliError, CliResult, EXIT_USAGE};
use mocha_core::model::Stage;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "mocha", version, about = "Video demoiréing on packed RAW: synthesis, analysis, training")]
struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides one configuration key; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render paired clean/moiré clips.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        clips: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Fixed capture scale for every clip.
        #[arg(long)]
        scale: Option<f64>,
        /// Multiplier on the default translation and rotation jitter.
        #[arg(long)]
        jitter: Option<f64>,
    },
    /// Colour correlation, moiré prior, temporal statistics or amplitude swap.
    Analyze {
        #[arg(value_enum)]
        kind: AnalyzeKind,
        /// Clip directories, corpus directories or NDT tensors.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Directory for PFM maps and swap reconstructions.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train one stage on a synthesized corpus.
    Train {
        #[arg(long)]
        stage: u32,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stage-1 weights to start stage 2 from.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Corpus for held-out PSNR; the training set when absent.
        #[arg(long)]
        holdout: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Restore the sRGB center frame of a packed RAW triplet.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        /// Packed RAW `[T,H,W,4]` NDT tensor.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Forward path; taken from the checkpoint manifest when absent.
        #[arg(long)]
        stage: Option<u32>,
        /// Center frame when the input has more than three frames.
        #[arg(long, default_value_t = 1)]
        center: usize,
    },
    /// Finite-difference check of every block, loss and the full model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Restrict to these rows.
        #[arg(long = "row")]
        rows: Vec<String>,
    },
}

fn threads() -> CliResult<usize> {
    match std::env::var("MOCHA_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Usage(format!("MOCHA_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for s in &cli.set {
        cfg.apply(s)?;
    }
    match &cli.command {
        Command::Synth { clips, seed, scale, jitter, .. } => {
            if let Some(n) = clips {
                cfg.clips = *n;
            }
            if let Some(s) = seed {
                cfg.synth_seed = *s;
            }
            if let Some(s) = scale {
                cfg.synth.scale_range = (*s, *s);
            }
            if let Some(j) = jitter {
                let d = mocha_core::synth::SynthConfig::default();
                cfg.synth.jitter_translation = j * d.jitter_translation;
                cfg.synth.jitter_rotation = j * d.jitter_rotation;
            }
        }
        Command::Train { stage, epochs, seed, .. } => {
            if let Some(e) = epochs {
                match stage {
                    1 => cfg.train.epochs_stage1 = *e,
                    _ => cfg.train.epochs_stage2 = *e,
                }
            }
            if let Some(s) = seed {
                cfg.train.seed = *s;
            }
        }
        _ => {}
    }
    cfg.train.model.validate()?;
    cfg.train.loss.weights.validate()?;
    cfg.synth.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let n = threads()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    let cfg = resolve(&cli)?;
    eprint!("# resolved config\n{}", cfg.render());
    match &cli.command {
        Command::Synth { out, .. } => commands::synth(&cfg, out),
        Command::Analyze { kind, inputs, csv, out_dir } => {
            commands::analyze(&cfg, *kind, inputs, csv.as_deref(), out_dir.as_deref())
        }
        Command::Train { stage, corpus, out, from, holdout, .. } => {
            let args = TrainArgs {
                stage: Stage::from_number(*stage)?,
                corpus,
                out,
                from: from.as_deref(),
                holdout: holdout.as_deref(),
            };
            commands::train(&cfg, &args)
        }
        Command::Infer { weights, input, out, stage, center } => {
            let stage = stage.map(Stage::from_number).transpose()?;
            commands::infer_cmd(&cfg, weights, input, out, stage, *center)
        }
        Command::Gradcheck { seed, rows } => commands::gradcheck(*seed, rows),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
