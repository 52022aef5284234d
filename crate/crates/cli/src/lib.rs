//! Command-line front end: argument parsing, run configuration and PLY output.

pub mod commands;
pub mod config;
pub mod ply;

use std::path::PathBuf;
use std::process::ExitCode;

use anseg::modulator::Mode;
use clap::{error::ErrorKind, Args, CommandFactory, Parser, Subcommand};

use crate::config::{Adapt, Preset, RunConfig};

/// Retrieval-augmented part segmentation of 3D point clouds.
#[derive(Debug, Parser)]
#[command(name = "anseg", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ModelFlags {
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// analogical, detr3d or re_detr3d.
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Memories per forward pass.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct TrainFlags {
    /// Epoch counts of the long schedules.
    #[arg(long = "paper-hparams")]
    pub long_schedule: bool,
    /// Overrides the stage's epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated category names.
        #[arg(long, value_delimiter = ',')]
        categories: Option<Vec<String>>,
        #[arg(long)]
        per_category: Option<usize>,
        #[arg(long)]
        points: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Within-scene pre-training on the base training split.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Cross-scene training, optionally starting from a pre-trained checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Disable within-scene co-training batches.
        #[arg(long)]
        no_within: bool,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        common: Common,
    },
    /// K-shot episodes over the novel categories.
    Fewshot {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, value_enum)]
        adapt: Option<Adapt>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate on a base split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        /// base-train or base-test.
        #[arg(long, default_value = "base-test")]
        split: String,
        /// Use each scene's own annotation as its memory.
        #[arg(long)]
        self_memory: bool,
        /// Oracle retriever restricted to the query's category.
        #[arg(long)]
        category_constrained: bool,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Rank stored memories by similarity to a scene.
    Retrieve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Scene file or scene id from the manifest.
        #[arg(long)]
        scene: String,
        #[arg(long)]
        topk: Option<usize>,
        #[arg(long)]
        level: Option<u8>,
        #[arg(long)]
        exclude_self: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Write colored PLY files of a parse and its memory correspondence.
    Viz {
        #[arg(long)]
        ckpt: PathBuf,
        /// Scene file to parse.
        #[arg(long)]
        scene: PathBuf,
        /// Memory scene file; the scene itself when omitted.
        #[arg(long)]
        memory: Option<PathBuf>,
        #[arg(long)]
        level: Option<u8>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Print the effective configuration as TOML.
    PrintConfig {
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        common: Common,
    },
}

fn usage_error(message: String) -> ! {
    Cli::command().error(ErrorKind::ArgumentConflict, message).exit()
}

/// Loads the config file and applies flag overrides.
pub fn resolve(common: &Common, model: Option<&ModelFlags>) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(m) = model {
        let mode = m.mode.unwrap_or(cfg.model.mode);
        if mode == Mode::Detr3d && m.k.is_some() {
            usage_error("--k selects memories per forward pass; detr3d mode uses none".into());
        }
        if let Some(p) = m.preset {
            cfg.model.preset = p;
        }
        cfg.model.mode = mode;
        if let Some(k) = m.k {
            cfg.model.memories = k;
        }
    }
    Ok(cfg)
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("ANSEG_THREADS") {
        let n: usize = v.parse().map_err(|_| anyhow::anyhow!("ANSEG_THREADS must be a positive integer, got {v:?}"))?;
        if n == 0 {
            anyhow::bail!("ANSEG_THREADS must be a positive integer");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

/// Parses the process arguments and runs the selected command.
pub fn main_entry() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|_| commands::run(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
