//! Few-shot fitting of a new subject's feature vector with the group frozen.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use super::gtf::{backward, forward_gtf, ModelView};
use super::{BatchItem, NoiseScale};
use crate::dynsys::{Cohort, Trajectory};
use crate::linalg::{dot, max_abs};
use crate::math::{abs, ln, sqrt};
use crate::model::{GroupParams, SubjectFeature};
use crate::rng::{stream, Purpose};
use crate::{Error, Result};

/// Shortest sequence accepted for fine-tuning.
pub const MIN_SEQUENCE: usize = 20;

/// Treatment of the new subject's noise variances.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum SigmaPolicy {
    /// Fixed variances.
    Frozen(Vec<f64>),
    /// Variances set to their closed-form optimum, the mean squared
    /// prediction error per dimension, at every evaluation.
    Profiled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum FineTuneMethod {
    /// Gradient descent with Armijo backtracking.
    #[default]
    Gradient,
    /// Newton steps on a scalar feature with a finite-difference curvature.
    Newton1d,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct FineTuneConfig {
    pub alpha: f64,
    /// Window length; the loss sums over all windows at `stride` offsets.
    /// `None` scores the whole sequence as one window.
    pub seq_len: Option<usize>,
    pub stride: usize,
    pub max_iters: usize,
    /// Convergence threshold on the largest gradient entry.
    pub tol: f64,
    /// Starting point; `None` starts from zero.
    pub init: Option<Vec<f64>>,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            seq_len: Some(30),
            stride: 1,
            max_iters: 500,
            tol: 1e-9,
            init: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneResult {
    pub feature: SubjectFeature,
    pub loss: f64,
    /// Variances used at the returned feature.
    pub sigma: Vec<f64>,
    pub iterations: usize,
    /// False when the iteration cap was hit; the best feature is still returned.
    pub converged: bool,
}

struct Problem<'a> {
    group: &'a GroupParams,
    cohort: Cohort,
    batch: Vec<BatchItem>,
    seq_len: usize,
    alpha: f64,
    sigma: &'a SigmaPolicy,
}

impl<'a> Problem<'a> {
    fn new(group: &'a GroupParams, seq: &Trajectory, sigma: &'a SigmaPolicy, cfg: &FineTuneConfig) -> Result<Self> {
        let spec = group.spec();
        if seq.len() < MIN_SEQUENCE {
            return Err(Error::InvalidArgument(format!(
                "fine-tuning needs at least {MIN_SEQUENCE} time steps, got {}",
                seq.len()
            )));
        }
        if seq.dim() != spec.n_obs {
            return Err(Error::Shape(format!(
                "sequence dimension {} differs from model dimension {}",
                seq.dim(),
                spec.n_obs
            )));
        }
        if let SigmaPolicy::Frozen(v) = sigma {
            if v.len() != spec.n_obs || !v.iter().all(|&s| s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidArgument("frozen variances must be positive, one per dimension".into()));
            }
        }
        if !(0.0..=1.0).contains(&cfg.alpha) || cfg.stride == 0 {
            return Err(Error::InvalidArgument("alpha must lie in [0, 1] and stride be positive".into()));
        }
        let seq_len = cfg.seq_len.unwrap_or(seq.len()).clamp(2, seq.len());
        let batch = (0..=seq.len() - seq_len)
            .step_by(cfg.stride)
            .map(|start| BatchItem { subject: 0, start })
            .collect();
        Ok(Self {
            group,
            cohort: Cohort::new(vec![seq.clone()])?,
            batch,
            seq_len,
            alpha: cfg.alpha,
            sigma,
        })
    }

    /// Loss, feature gradient and the variances used.
    fn eval(&self, l: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let features = [SubjectFeature(l.to_vec())];
        let n = self.group.spec().n_obs;
        let unit = [NoiseScale { log_sigma: vec![0.0; n] }];
        let view = ModelView {
            group: self.group,
            features: &features,
            noise: &unit,
        };
        let pass = forward_gtf(view, &self.cohort, &self.batch, self.alpha, self.seq_len)?;
        let sigma = match self.sigma {
            SigmaPolicy::Frozen(v) => v.clone(),
            SigmaPolicy::Profiled => {
                let data = self.cohort.subjects[0].data().as_slice();
                let mut sq = vec![0.0; n];
                for c in &pass.items {
                    let rows = &data[(c.item.start + 1) * n..(c.item.start + self.seq_len) * n];
                    for (k, (x, p)) in rows.iter().zip(&c.predictions).enumerate() {
                        sq[k % n] += (x - p) * (x - p);
                    }
                }
                let count = pass.n_scored() as f64;
                sq.iter().map(|s| (s / count).max(1e-12)).collect()
            }
        };
        let noise = [NoiseScale {
            log_sigma: sigma.iter().map(|&s| ln(s)).collect(),
        }];
        let view = ModelView {
            group: self.group,
            features: &features,
            noise: &noise,
        };
        let grads = backward(view, &self.cohort, &pass, 0.0)?;
        if !grads.objective.is_finite() {
            return Err(Error::TrainingDiverged { element: 0, retries: 0 });
        }
        Ok((grads.objective, grads.features, sigma))
    }

    fn eval_or_inf(&self, l: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        match self.eval(l) {
            Ok(r) if r.1.iter().all(|v| v.is_finite()) => r,
            _ => (f64::INFINITY, vec![0.0; l.len()], Vec::new()),
        }
    }
}

/// Normalized GTF loss of `seq` at feature `l` and its gradient with respect to `l`.
pub fn feature_objective(
    group: &GroupParams,
    seq: &Trajectory,
    l: &SubjectFeature,
    sigma: &SigmaPolicy,
    cfg: &FineTuneConfig,
) -> Result<(f64, Vec<f64>)> {
    let problem = Problem::new(group, seq, sigma, cfg)?;
    if l.len() != group.spec().n_feat {
        return Err(Error::Shape("feature length differs from the model".into()));
    }
    let (f, g, _) = problem.eval(l.as_slice())?;
    Ok((f, g))
}

/// Fits a new subject's feature on `seq` with every group parameter frozen.
pub fn fine_tune_feature(
    group: &GroupParams,
    sigma: &SigmaPolicy,
    seq: &Trajectory,
    cfg: &FineTuneConfig,
    method: FineTuneMethod,
) -> Result<FineTuneResult> {
    let nf = group.spec().n_feat;
    if method == FineTuneMethod::Newton1d && nf != 1 {
        return Err(Error::InvalidArgument("newton1d requires a scalar feature".into()));
    }
    let problem = Problem::new(group, seq, sigma, cfg)?;
    let mut l = cfg.init.clone().unwrap_or_else(|| vec![0.0; nf]);
    if l.len() != nf {
        return Err(Error::Shape("initial feature length differs from the model".into()));
    }
    let (mut f, mut g, mut sig) = problem.eval(&l)?;
    let mut converged = false;
    let mut iterations = 0;
    let mut step = 1.0;
    while iterations < cfg.max_iters {
        if max_abs(&g) <= cfg.tol {
            converged = true;
            break;
        }
        iterations += 1;
        let dir: Vec<f64> = match method {
            FineTuneMethod::Gradient => g.iter().map(|v| -v).collect(),
            FineTuneMethod::Newton1d => {
                let delta = 1e-5 * abs(l[0]).max(1.0);
                let gp = problem.eval_or_inf(&[l[0] + delta]).1[0];
                let gm = problem.eval_or_inf(&[l[0] - delta]).1[0];
                let h = (gp - gm) / (2.0 * delta);
                step = 1.0;
                if h > 0.0 && h.is_finite() {
                    vec![-g[0] / h]
                } else {
                    vec![-g[0]]
                }
            }
        };
        let slope = dot(&g, &dir);
        let mut accepted = false;
        for _ in 0..60 {
            let cand: Vec<f64> = l.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            let (fc, gc, sc) = problem.eval_or_inf(&cand);
            if fc <= f + 1e-4 * step * slope {
                let moved = sqrt(dir.iter().map(|d| d * d).sum::<f64>()) * step;
                l = cand;
                f = fc;
                g = gc;
                sig = sc;
                accepted = true;
                if method == FineTuneMethod::Gradient {
                    step = (step * 2.0).min(1e6);
                }
                if moved < 1e-14 * (1.0 + sqrt(dot(&l, &l))) {
                    converged = true;
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted || converged {
            // no numerically representable descent left
            converged = true;
            break;
        }
    }
    if !converged && max_abs(&g) <= cfg.tol {
        converged = true;
    }
    Ok(FineTuneResult {
        feature: SubjectFeature(l),
        loss: f,
        sigma: sig,
        iterations,
        converged,
    })
}

/// Spread of features fitted to several windows of one long trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyReport {
    pub features: Vec<SubjectFeature>,
    /// Per-coordinate sample standard deviation (0 for fewer than two fits).
    pub std: Vec<f64>,
    /// Windows whose fit failed; they are excluded from the statistic.
    pub failures: usize,
}

/// Fine-tunes on `n_resamples` random windows of length `t_max` drawn from
/// `long`, seeded from `seed`.
#[allow(clippy::too_many_arguments)]
pub fn feature_uncertainty(
    group: &GroupParams,
    long: &Trajectory,
    t_max: usize,
    n_resamples: usize,
    sigma: &SigmaPolicy,
    cfg: &FineTuneConfig,
    method: FineTuneMethod,
    seed: u64,
) -> Result<UncertaintyReport> {
    if t_max > long.len() {
        return Err(Error::SequenceTooLong {
            subject: 0,
            t_seq: t_max,
            t_max: long.len(),
        });
    }
    let mut rng = stream(seed, 0, Purpose::Resample);
    let starts: Vec<usize> = (0..n_resamples)
        .map(|_| rng.random_range(0..=long.len() - t_max))
        .collect();
    fine_tune_windows(group, long, t_max, &starts, sigma, cfg, method)
}

/// [`feature_uncertainty`] with explicit window starts.
pub fn fine_tune_windows(
    group: &GroupParams,
    long: &Trajectory,
    t_max: usize,
    starts: &[usize],
    sigma: &SigmaPolicy,
    cfg: &FineTuneConfig,
    method: FineTuneMethod,
) -> Result<UncertaintyReport> {
    let mut features = Vec::new();
    let mut failures = 0;
    for &start in starts {
        let window = long.window(start, t_max)?;
        match fine_tune_feature(group, sigma, &window, cfg, method) {
            Ok(r) => features.push(r.feature),
            Err(_) => failures += 1,
        }
    }
    let nf = group.spec().n_feat;
    let k = features.len();
    let std = (0..nf)
        .map(|i| {
            if k < 2 || features.iter().all(|f| f.0[i] == features[0].0[i]) {
                return 0.0;
            }
            let mean = features.iter().map(|f| f.0[i]).sum::<f64>() / k as f64;
            let ss: f64 = features.iter().map(|f| (f.0[i] - mean) * (f.0[i] - mean)).sum();
            sqrt(ss / (k - 1) as f64)
        })
        .collect();
    Ok(UncertaintyReport { features, std, failures })
}
