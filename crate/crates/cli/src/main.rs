mod commands;
mod config;
mod error;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Ctx, Logger, Pins};
use config::{RunConfig, Workspace};
use error::CliError;

/// Pose-sequence generation, latent inversion and skeleton-to-image rendering.
#[derive(Parser)]
#[command(name = "poseforge", version)]
struct Cli {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory holding data, checkpoints and outputs.
    #[arg(long, global = true, default_value = "run")]
    dir: PathBuf,
    /// Overrides POSEFORGE_SEED and the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override one config value, e.g. `--set pose_gan.steps=500`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the procedural motion dataset.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the single-pose WGAN-GP generator and critic.
    TrainPose {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the sequence generator and discriminator on a trained pose generator.
    TrainSeq {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the skeleton-to-image transformer on synthetic pairs.
    TrainS2i {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Sample sequences from the trained generators.
    Generate {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        length: Option<usize>,
        /// Condition every sample on this class; otherwise classes cycle.
        #[arg(long)]
        class: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Continue sequences from their first frames.
    Predict {
        /// Number of leading frames used as constraints.
        #[arg(long, default_value_t = 4)]
        frames: usize,
        /// Sequence file; defaults to the test split of the dataset.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fill in sequences around pinned frames.
    Complete {
        /// Frame index or `last`; repeatable.
        #[arg(long = "pin", required = true)]
        pins: Vec<String>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Frame and video Inception Scores of a sequence file.
    Score {
        /// Sequence file; defaults to the dataset itself.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        splits: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-frame PNGs and an animated GIF of one sequence.
    Render {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Also run the skeleton-to-image transformer.
        #[arg(long)]
        pixels: bool,
        #[arg(long, default_value_t = 4)]
        scale: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::TrainPose { .. } => "train-pose",
            Command::TrainSeq { .. } => "train-seq",
            Command::TrainS2i { .. } => "train-s2i",
            Command::Generate { .. } => "generate",
            Command::Predict { .. } => "predict",
            Command::Complete { .. } => "complete",
            Command::Score { .. } => "score",
            Command::Render { .. } => "render",
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.sets, cli.seed)?;
    std::fs::create_dir_all(&cli.dir).map_err(|e| CliError::Other(format!("{}: {e}", cli.dir.display())))?;
    let log = Logger::new(cli.command.name(), &cli.dir)?;
    let mut ctx = Ctx { cfg, ws: Workspace { dir: cli.dir }, log };
    match cli.command {
        Command::GenData { out } => commands::gen_data(&mut ctx, out)?,
        Command::TrainPose { data } => commands::train_pose(&mut ctx, data)?,
        Command::TrainSeq { data } => commands::train_seq(&mut ctx, data)?,
        Command::TrainS2i { data } => commands::train_s2i_cmd(&mut ctx, data)?,
        Command::Generate { count, length, class, out } => commands::generate(&mut ctx, count, length, class, out)?,
        Command::Predict { frames, input, count, out } => commands::invert(&mut ctx, Pins::Prefix(frames), input, count, out, "predicted.jsonl")?,
        Command::Complete { pins, input, count, out } => commands::invert(&mut ctx, Pins::Indices(pins), input, count, out, "completed.jsonl")?,
        Command::Score { input, splits, out } => commands::score(&mut ctx, input, splits, out)?,
        Command::Render { input, index, pixels, scale, out } => commands::render(&mut ctx, input, index, pixels, scale, out)?,
    }
    ctx.log.finish()
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("poseforge: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
