//! End-to-end training of group projections, subject features and noise
//! scales with generalized teacher forcing, plus few-shot fine-tuning.

mod finetune;
mod gtf;
mod radam;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::ControlFlow;

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Uniform};

use crate::dynsys::Cohort;
use crate::math::{exp, ln, powf, sqrt, variance};
use crate::model::{Backbone, Block, GroupParams, LiftMode, ModelSpec, ObsKind, Scheme, SubjectFeature};
use crate::rng::{stream, Purpose, Rng, RngState};
use crate::{Error, Result};

pub use finetune::{
    feature_objective, feature_uncertainty, fine_tune_feature, fine_tune_windows, MIN_SEQUENCE, FineTuneConfig, FineTuneMethod,
    FineTuneResult, SigmaPolicy, UncertaintyReport,
};
pub use gtf::{
    backward, forward_gtf, gtf_interpolate, nll_loss, objective, ForwardPass, Gradients, ModelView,
    SequenceCache,
};
pub use radam::{radam_update, Moments, RadamConfig};

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    /// Latent dimension M; `None` uses the observation dimension.
    pub latent: Option<usize>,
    /// Hidden dimension L; `None` uses `20·M`.
    pub hidden: Option<usize>,
    pub n_feat: usize,
    pub backbone: Backbone,
    pub scheme: Scheme,
    pub lift: LiftMode,
    pub obs: ObsKind,
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub lr_features: f64,
    pub lr_group: f64,
    /// Factor both learning rates reach at the last epoch, decaying
    /// geometrically from 1; 1 keeps them constant.
    pub lr_decay: f64,
    pub l2_group: f64,
    /// Mean of the Gaussian the features start from (standard deviation 0.1).
    pub feature_init_mean: f64,
    /// Sequences per batch; `None` uses `8·S`.
    pub batch_size: Option<usize>,
    pub seq_len: usize,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub seed: u64,
    /// Batch re-draws allowed after a non-finite forward or backward pass.
    pub max_retries: usize,
    /// Keeps features at their initial value (used by the ensemble baseline).
    pub freeze_features: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            latent: None,
            hidden: None,
            n_feat: 1,
            backbone: Backbone::ShPlrnn,
            scheme: Scheme::NaiveLinear,
            lift: LiftMode::Trained,
            obs: ObsKind::Identity,
            alpha_start: 0.2,
            alpha_end: 0.02,
            lr_features: 1e-3,
            lr_group: 1e-4,
            lr_decay: 1.0,
            l2_group: 1e-5,
            feature_init_mean: 0.0,
            batch_size: None,
            seq_len: 30,
            epochs: 1000,
            batches_per_epoch: 50,
            seed: 0,
            max_retries: 3,
            freeze_features: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.into()));
        if !(0.0..=1.0).contains(&self.alpha_start) || !(0.0..=1.0).contains(&self.alpha_end) {
            return bad("alpha values must lie in [0, 1]");
        }
        if self.alpha_start < self.alpha_end {
            return bad("alpha_start must not be smaller than alpha_end");
        }
        if !(self.lr_features > 0.0 && self.lr_group > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if !(self.l2_group >= 0.0) {
            return bad("l2_group must be nonnegative");
        }
        if self.n_feat == 0 || self.seq_len < 2 || self.epochs == 0 || self.batches_per_epoch == 0 {
            return bad("n_feat, epochs and batches_per_epoch must be positive and seq_len at least 2");
        }
        if self.batch_size == Some(0) || self.latent == Some(0) || self.hidden == Some(0) {
            return bad("sizes must be positive");
        }
        Ok(())
    }

    /// Model architecture for observation dimension `n_obs`.
    pub fn model_spec(&self, n_obs: usize) -> ModelSpec {
        let latent = self.latent.unwrap_or(n_obs);
        ModelSpec {
            backbone: self.backbone,
            scheme: self.scheme,
            lift: self.lift,
            obs: self.obs,
            n_obs,
            latent,
            hidden: self.hidden.unwrap_or(20 * latent),
            n_feat: self.n_feat,
        }
    }

    /// Effective batch size for `n_subjects`.
    pub fn effective_batch_size(&self, n_subjects: usize) -> usize {
        self.batch_size.unwrap_or(8 * n_subjects).max(1)
    }

    fn radam(&self) -> RadamConfig {
        RadamConfig::default()
    }
}

/// Diagonal of a subject's noise covariance, stored as logarithms.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NoiseScale {
    pub log_sigma: Vec<f64>,
}

impl NoiseScale {
    pub fn from_variances(var: &[f64]) -> Self {
        Self {
            log_sigma: var.iter().map(|&v| ln(v.max(1e-8))).collect(),
        }
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.iter().map(|&s| exp(s)).collect()
    }
}

/// Optimizer moments for every parameter set plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OptimizerState {
    pub step: u64,
    pub group: Moments,
    pub features: Moments,
    pub noise: Moments,
}

/// Everything needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub group: GroupParams,
    pub features: Vec<SubjectFeature>,
    pub noise: Vec<NoiseScale>,
    pub optimizer: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
    /// Position of the batch sampler.
    pub rng: RngState,
}

impl TrainState {
    pub fn view(&self) -> ModelView<'_> {
        ModelView {
            group: &self.group,
            features: &self.features,
            noise: &self.noise,
        }
    }

    pub fn n_subjects(&self) -> usize {
        self.features.len()
    }

    fn features_flat(&self) -> Vec<f64> {
        self.features.iter().flat_map(|f| f.0.iter().copied()).collect()
    }

    fn noise_flat(&self) -> Vec<f64> {
        self.noise.iter().flat_map(|n| n.log_sigma.iter().copied()).collect()
    }
}

/// Fresh training state: scaled Xavier-uniform group matrices, small Gaussian
/// features and noise variances equal to each subject's data variance.
pub fn init(config: &TrainConfig, cohort: &Cohort) -> Result<TrainState> {
    config.validate()?;
    cohort.validate()?;
    let spec = config.model_spec(cohort.dim());
    let mut group = GroupParams::zeros(spec)?;
    let mut rng = stream(config.seed, 0, Purpose::Init);
    for info in group.blocks().to_vec() {
        let mut bound = sqrt(6.0 / (info.rows + info.cols) as f64);
        if info.block != Block::Lift {
            bound *= 0.1;
        }
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        for v in &mut group.values_mut()[info.range()] {
            *v = dist.sample(&mut rng);
        }
    }
    let normal = Normal::new(config.feature_init_mean, 0.1).map_err(|_| Error::InvalidArgument("feature_init_mean must be finite".into()))?;
    let features = (0..cohort.len())
        .map(|_| {
            if config.freeze_features {
                SubjectFeature(vec![1.0; config.n_feat])
            } else {
                SubjectFeature((0..config.n_feat).map(|_| normal.sample(&mut rng)).collect())
            }
        })
        .collect();
    let noise = cohort
        .subjects
        .iter()
        .map(|s| {
            let var: Vec<f64> = (0..s.dim()).map(|i| variance(&s.column(i))).collect();
            NoiseScale::from_variances(&var)
        })
        .collect();
    let n = cohort.dim();
    let optimizer = OptimizerState {
        step: 0,
        group: Moments::zeros(group.len()),
        features: Moments::zeros(cohort.len() * config.n_feat),
        noise: Moments::zeros(cohort.len() * n),
    };
    Ok(TrainState {
        group,
        features,
        noise,
        optimizer,
        epoch: 0,
        rng: RngState::capture(&stream(config.seed, 0, Purpose::Batches)),
    })
}

/// Geometric decay from `alpha_start` at epoch 0 to `alpha_end` at the last epoch.
pub fn alpha_schedule(config: &TrainConfig, epoch: usize) -> f64 {
    if config.epochs <= 1 || config.alpha_start == config.alpha_end {
        return config.alpha_start;
    }
    let frac = epoch.min(config.epochs - 1) as f64 / (config.epochs - 1) as f64;
    config.alpha_start * powf(config.alpha_end / config.alpha_start, frac)
}

/// Learning-rate multiplier at `epoch`: geometric from 1 to `lr_decay`.
pub fn lr_schedule(config: &TrainConfig, epoch: usize) -> f64 {
    if config.epochs <= 1 || config.lr_decay == 1.0 {
        return 1.0;
    }
    let frac = epoch.min(config.epochs - 1) as f64 / (config.epochs - 1) as f64;
    powf(config.lr_decay, frac)
}

/// One training subsequence: subject index and 0-based start row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchItem {
    pub subject: usize,
    pub start: usize,
}

/// Draws `batch_size` subsequences of length `seq_len`.
///
/// With `batch_size ≥ S` every subject contributes `⌊batch_size/S⌋` sequences
/// and the remainder goes to distinct randomly chosen subjects; otherwise
/// `batch_size` distinct subjects are drawn.
pub fn sample_batch(lengths: &[usize], batch_size: usize, seq_len: usize, rng: &mut Rng) -> Result<Vec<BatchItem>> {
    for (j, &t_max) in lengths.iter().enumerate() {
        if seq_len > t_max {
            return Err(Error::SequenceTooLong {
                subject: j,
                t_seq: seq_len,
                t_max,
            });
        }
    }
    let s = lengths.len();
    if s == 0 {
        return Err(Error::InvalidArgument("no subjects to sample from".into()));
    }
    let mut subjects: Vec<usize> = Vec::with_capacity(batch_size);
    if batch_size >= s {
        for j in 0..s {
            subjects.extend(core::iter::repeat_n(j, batch_size / s));
        }
        let mut extra = sample(rng, s, batch_size % s).into_vec();
        extra.sort_unstable();
        subjects.extend(extra);
    } else {
        let mut picked = sample(rng, s, batch_size).into_vec();
        picked.sort_unstable();
        subjects.extend(picked);
    }
    Ok(subjects
        .into_iter()
        .map(|j| BatchItem {
            subject: j,
            start: rng.random_range(0..=lengths[j] - seq_len),
        })
        .collect())
}

/// Mean objective of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub alpha: f64,
}

/// Applies one RAdam step to every parameter set.
pub fn radam_step(state: &mut TrainState, grads: &Gradients, config: &TrainConfig) {
    let rc = config.radam();
    state.optimizer.step += 1;
    let t = state.optimizer.step;
    let scale = lr_schedule(config, state.epoch);
    let mask = state.group.trainable_mask();
    radam_update(
        state.group.values_mut(),
        &grads.group,
        Some(&mask),
        &mut state.optimizer.group,
        t,
        scale * config.lr_group,
        &rc,
    );
    if !config.freeze_features {
        let mut flat = state.features_flat();
        radam_update(&mut flat, &grads.features, None, &mut state.optimizer.features, t, scale * config.lr_features, &rc);
        let nf = config.n_feat;
        for (j, f) in state.features.iter_mut().enumerate() {
            f.0.copy_from_slice(&flat[j * nf..(j + 1) * nf]);
        }
    }
    let mut flat = state.noise_flat();
    radam_update(&mut flat, &grads.log_sigma, None, &mut state.optimizer.noise, t, scale * config.lr_features, &rc);
    let n = state.noise.first().map_or(0, |s| s.log_sigma.len());
    for (j, s) in state.noise.iter_mut().enumerate() {
        s.log_sigma.copy_from_slice(&flat[j * n..(j + 1) * n]);
    }
}

/// Gradient of one freshly drawn batch, re-drawing after non-finite passes.
fn batch_gradient(
    state: &TrainState,
    cohort: &Cohort,
    config: &TrainConfig,
    alpha: f64,
    rng: &mut Rng,
) -> Result<Gradients> {
    let lengths: Vec<usize> = cohort.subjects.iter().map(|s| s.len()).collect();
    let batch_size = config.effective_batch_size(cohort.len());
    let mut last_element = 0;
    for _ in 0..=config.max_retries {
        let batch = sample_batch(&lengths, batch_size, config.seq_len, rng)?;
        let attempt = forward_gtf(state.view(), cohort, &batch, alpha, config.seq_len)
            .and_then(|pass| backward(state.view(), cohort, &pass, config.l2_group));
        match attempt {
            Ok(g) if g.is_finite() => return Ok(g),
            Ok(_) => last_element = 0,
            Err(Error::TrainingDiverged { element, .. }) => last_element = element,
            Err(e) => return Err(e),
        }
    }
    Err(Error::TrainingDiverged {
        element: last_element,
        retries: config.max_retries,
    })
}

/// Runs the remaining epochs of `state`, calling `on_epoch` after each one.
/// Returning `ControlFlow::Break` from the callback stops early.
pub fn train_from(
    mut state: TrainState,
    cohort: &Cohort,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &TrainState) -> ControlFlow<()>,
) -> Result<(TrainState, Vec<EpochRecord>)> {
    config.validate()?;
    cohort.validate()?;
    if state.n_subjects() != cohort.len() {
        return Err(Error::Shape(format!(
            "state has {} subjects, cohort has {}",
            state.n_subjects(),
            cohort.len()
        )));
    }
    if state.group.spec() != &config.model_spec(cohort.dim()) {
        return Err(Error::Shape("state architecture differs from the configuration".into()));
    }
    let mut history = Vec::new();
    let mut rng = state.rng.restore();
    while state.epoch < config.epochs {
        let alpha = alpha_schedule(config, state.epoch);
        let mut total = 0.0;
        for _ in 0..config.batches_per_epoch {
            let grads = batch_gradient(&state, cohort, config, alpha, &mut rng)?;
            total += grads.objective;
            radam_step(&mut state, &grads, config);
        }
        let record = EpochRecord {
            epoch: state.epoch,
            loss: total / config.batches_per_epoch as f64,
            alpha,
        };
        state.epoch += 1;
        state.rng = RngState::capture(&rng);
        history.push(record);
        if on_epoch(&record, &state).is_break() {
            break;
        }
    }
    Ok((state, history))
}

/// Initializes and trains for `config.epochs` epochs.
pub fn train(cohort: &Cohort, config: &TrainConfig) -> Result<(TrainState, Vec<EpochRecord>)> {
    let state = init(config, cohort)?;
    train_from(state, cohort, config, |_, _| ControlFlow::Continue(()))
}

/// Configuration of one independently trained per-subject model: a single
/// feature frozen at 1 and group parameters moving at the feature rate.
pub fn ensemble_member_config(config: &TrainConfig) -> TrainConfig {
    TrainConfig {
        n_feat: 1,
        scheme: Scheme::NaiveLinear,
        freeze_features: true,
        lr_group: config.lr_features,
        ..config.clone()
    }
}

/// Configuration of ensemble member `j`, seeded from `(config.seed, j)`.
pub fn ensemble_member(config: &TrainConfig, j: usize) -> TrainConfig {
    TrainConfig {
        seed: config.seed.wrapping_add((j as u64) << 32),
        ..ensemble_member_config(config)
    }
}

/// Baseline of one independent model per subject, trained with the same
/// algorithm. Member `j` is seeded from `(config.seed, j)`.
pub fn train_ensemble(cohort: &Cohort, config: &TrainConfig) -> Result<Vec<(TrainState, Vec<EpochRecord>)>> {
    (0..cohort.len())
        .map(|j| {
            let cfg = ensemble_member(config, j);
            let sub = cohort.select(&[j]);
            let (mut state, history) = train(&sub, &cfg)?;
            state.features[0] = SubjectFeature(vec![1.0]);
            Ok((state, history))
        })
        .collect()
}
