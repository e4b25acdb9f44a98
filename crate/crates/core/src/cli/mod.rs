//! Command-line front end. Every command reads one TOML config, applies
//! `SCORETUNE__*` environment overrides, and writes artifacts under the
//! output directory.

mod checkpoint;
mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{
    DataConfig, DatasetSection, EvalSection, PolicyConfig, RunConfig, SelectSection, SftSection, TrainSection,
    ENV_PREFIX,
};

use crate::dataset::DatasetError;
use crate::grpo::GrpoError;
use crate::policy::PolicyError;
use crate::tts::TtsError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical error: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub(crate) fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<GrpoError> for CliError {
    fn from(e: GrpoError) -> Self {
        match e {
            GrpoError::Config(_) | GrpoError::Reward(_) | GrpoError::GroupSize { .. } => CliError::Config(e.to_string()),
            GrpoError::Numerical { .. } | GrpoError::NonFiniteReward { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TtsError> for CliError {
    fn from(e: TtsError) -> Self {
        match e {
            TtsError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "scoretune", version, about = "Reinforcement tuning for score-prediction policies")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML run config; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run single-threaded.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a config file with every default filled in.
    Init,
    /// Build the cold-start corpus with the simulated teacher.
    BuildDataset,
    /// Supervised fit on a corpus.
    Sft {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Two-stage reinforcement training.
    Train {
        /// Initialize the policy from this checkpoint (stage 2 from stage 1, or after SFT).
        #[arg(long, conflicts_with = "resume")]
        init_checkpoint: Option<PathBuf>,
        /// Continue an interrupted run from one of its epoch checkpoints.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Correlate predictions with truth on the held-out split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Best-of-N selection plus reflection with mock clients.
    Select {
        #[arg(long)]
        prompts: Option<PathBuf>,
    },
}

/// Resolves the config for `common` and runs `command`.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.common.config.as_deref())?;
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.common.output {
        cfg.output = out.clone();
    }
    cfg.validate()?;
    if cli.common.deterministic {
        // a second build fails harmlessly when the pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    let det = cli.common.deterministic;
    match cli.command {
        Command::Init => commands::init(&cfg),
        Command::BuildDataset => commands::build_dataset(&cfg, det),
        Command::Sft { corpus } => commands::sft(&cfg, corpus),
        Command::Train {
            init_checkpoint,
            resume,
        } => commands::train(&cfg, det, init_checkpoint, resume),
        Command::Eval {
            checkpoint,
            predictions,
        } => commands::eval(&cfg, checkpoint, predictions),
        Command::Select { prompts } => commands::select(&cfg, prompts),
    }
}
