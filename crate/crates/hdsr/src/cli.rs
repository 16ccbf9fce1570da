//! Argument parsing and exit codes: 0 success, 2 partial success with
//! flags, 1 failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::error;

use crate::config::{ExperimentConfig, Task, TrainMode};
use crate::pipeline::{self, Outcome};
use crate::THREADS_ENV;

#[derive(Debug, Parser)]
#[command(name = "hdsr", version, about = "Hierarchical dynamical-systems reconstruction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a preset cohort and write it as a cohort directory.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        preset: Option<String>,
    },
    /// Train hierarchical or ensemble models.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        preset: Option<String>,
        /// Cohort directory to train on.
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<TrainMode>,
        /// Number of independent seeded runs.
        #[arg(long)]
        runs: Option<usize>,
        /// Checkpoint or ensemble directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score free-running generations against reference trajectories.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// A run: checkpoint file or ensemble directory (repeatable).
        #[arg(long = "checkpoint")]
        runs: Vec<PathBuf>,
        /// Reference cohort directory.
        #[arg(long)]
        cohort: Option<PathBuf>,
    },
    /// Fit a new subject's feature and predict its control parameter.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Headerless CSV of the new subject's observations.
        #[arg(long)]
        sequence: Option<PathBuf>,
    },
    /// Feature-space analyses of trained checkpoints.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Hierarchical checkpoint (repeatable).
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        /// Analysis to run (repeatable); all applicable ones by default.
        #[arg(long = "task", value_enum)]
        tasks: Vec<Task>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    if common.out.is_some() {
        cfg.out.clone_from(&common.out);
    }
    Ok(cfg)
}

/// Applies the thread cap from the environment to the global pool.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().with_context(|| format!("{THREADS_ENV}={v:?} is not a positive integer"))?;
        anyhow::ensure!(n > 0, "{THREADS_ENV} must be positive");
        // An already initialized pool keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn dispatch(command: Command) -> Result<Outcome> {
    init_threads()?;
    let (cfg, run): (ExperimentConfig, fn(&ExperimentConfig, &Path) -> Result<Outcome>) = match command {
        Command::Generate { common, preset } => {
            let mut cfg = load_config(&common)?;
            if preset.is_some() {
                cfg.cohort.preset = preset;
            }
            (cfg, pipeline::cmd_generate)
        }
        Command::Train {
            common,
            preset,
            cohort,
            mode,
            runs,
            resume,
        } => {
            let mut cfg = load_config(&common)?;
            if preset.is_some() {
                cfg.cohort.preset = preset;
            }
            if cohort.is_some() {
                cfg.cohort.dir = cohort;
            }
            if let Some(m) = mode {
                cfg.run.mode = m;
            }
            if let Some(r) = runs {
                cfg.run.runs = r;
            }
            if resume.is_some() {
                cfg.run.resume = resume;
            }
            (cfg, pipeline::cmd_train)
        }
        Command::Evaluate { common, runs, cohort } => {
            let mut cfg = load_config(&common)?;
            if !runs.is_empty() {
                cfg.evaluate.runs = runs;
            }
            if cohort.is_some() {
                cfg.evaluate.cohort = cohort;
            }
            (cfg, pipeline::cmd_evaluate)
        }
        Command::Finetune {
            common,
            checkpoint,
            sequence,
        } => {
            let mut cfg = load_config(&common)?;
            if checkpoint.is_some() {
                cfg.finetune.checkpoint = checkpoint;
            }
            if sequence.is_some() {
                cfg.finetune.sequence = sequence;
            }
            (cfg, pipeline::cmd_finetune)
        }
        Command::Analyze {
            common,
            checkpoints,
            tasks,
        } => {
            let mut cfg = load_config(&common)?;
            if !checkpoints.is_empty() {
                cfg.analyze.checkpoints = checkpoints;
            }
            if !tasks.is_empty() {
                cfg.analyze.tasks = tasks;
            }
            (cfg, pipeline::cmd_analyze)
        }
    };
    let out = cfg.out_dir()?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    run(&cfg, &out)
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(outcome) => outcome.exit_code(),
        Err(e) => {
            error!("{e:#}");
            1
        }
    }
}
