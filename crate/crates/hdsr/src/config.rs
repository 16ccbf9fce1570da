//! Experiment configuration files (TOML). Every table rejects unknown keys.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hdsr_core::dynsys::StandardizeMode;
use hdsr_core::eval::EvalConfig;
use hdsr_core::train::{FineTuneConfig, FineTuneMethod, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Base seed; `--seed` overrides it. Defaults to 0.
    pub seed: Option<u64>,
    /// Output directory; `--out` overrides it.
    pub out: Option<PathBuf>,
    pub cohort: CohortSection,
    pub train: TrainConfig,
    pub run: RunSection,
    pub evaluate: EvaluateSection,
    pub finetune: FinetuneSection,
    pub analyze: AnalyzeSection,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Standardize {
    #[default]
    Global,
    PerSubjectDimension,
    None,
}

impl Standardize {
    pub fn mode(self) -> Option<StandardizeMode> {
        match self {
            Standardize::Global => Some(StandardizeMode::Global),
            Standardize::PerSubjectDimension => Some(StandardizeMode::PerSubjectDimension),
            Standardize::None => None,
        }
    }
}

/// Where the data comes from: a built-in preset or a cohort directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSection {
    pub preset: Option<String>,
    pub dir: Option<PathBuf>,
    /// Preset seed; defaults to the experiment seed.
    pub seed: Option<u64>,
    pub t_max: Option<usize>,
    pub noise_fraction: Option<f64>,
    pub transient_steps: Option<usize>,
    pub standardize: Standardize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    #[default]
    Hierarchical,
    Ensemble,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub mode: TrainMode,
    /// Independent seeded runs `seed, seed + 1, …`, executed concurrently.
    pub runs: usize,
    /// Checkpoint (hierarchical) or member directory (ensemble) to continue.
    pub resume: Option<PathBuf>,
    /// Snapshot interval in epochs; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            mode: TrainMode::Hierarchical,
            runs: 1,
            resume: None,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    /// One entry per run: a checkpoint file or an ensemble member directory.
    pub runs: Vec<PathBuf>,
    /// Reference data; by default long clean trajectories are re-simulated
    /// from the recipe stored in the checkpoint.
    pub cohort: Option<PathBuf>,
    pub metrics: EvalConfig,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaChoice {
    /// Closed-form optimum at every evaluation.
    #[default]
    Profiled,
    /// Mean of the training subjects' diagonals, held fixed.
    TrainingMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UncertaintySection {
    pub t_max: usize,
    pub n_resamples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub checkpoint: Option<PathBuf>,
    /// Headerless CSV of the new subject's raw observations.
    pub sequence: Option<PathBuf>,
    pub dt: Option<f64>,
    pub method: FineTuneMethod,
    pub sigma: SigmaChoice,
    /// Column of the training gt_params the regression predicts.
    pub param_index: usize,
    pub optimizer: FineTuneConfig,
    pub uncertainty: Option<UncertaintySection>,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            sequence: None,
            dt: None,
            method: FineTuneMethod::Newton1d,
            sigma: SigmaChoice::Profiled,
            param_index: 0,
            optimizer: FineTuneConfig::default(),
            uncertainty: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Pca,
    Regression,
    Gmm,
    Robustness,
    Landscape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeSection {
    /// Headerless CSV of raw observations.
    pub sequence: PathBuf,
    pub dt: Option<f64>,
    /// Grid bounds; by default the training feature range widened by its
    /// own width on both sides.
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub points: usize,
}

impl Default for LandscapeSection {
    fn default() -> Self {
        Self {
            sequence: PathBuf::new(),
            dt: None,
            min: None,
            max: None,
            points: 201,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSection {
    /// Hierarchical checkpoints; the first drives the single-run analyses.
    pub checkpoints: Vec<PathBuf>,
    /// Empty selects every analysis the inputs support.
    pub tasks: Vec<Task>,
    pub gmm_k: usize,
    pub gmm_n_init: usize,
    pub landscape: Option<LandscapeSection>,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self {
            checkpoints: Vec::new(),
            tasks: Vec::new(),
            gmm_k: 2,
            gmm_n_init: 10,
            landscape: None,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn out_dir(&self) -> Result<PathBuf> {
        match &self.out {
            Some(p) => Ok(p.clone()),
            None => bail!("no output directory: pass --out or set `out` in the config"),
        }
    }
}

/// Fails unless `path` exists.
pub fn require_exists(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(())
}
