//! Long-term agreement between generated and reference trajectories: the
//! binned state-space divergence and the power-spectrum Hellinger distance.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::dynsys::Trajectory;
use crate::fft::fft_real;
use crate::linalg::Mat;
use crate::math::{abs, exp, floor, ln, mad, median, sqrt};
use crate::model::{generate_trajectory, observe, SubjectModel};
use crate::{Error, Result};

/// Probability floor given to empty reference bins that the generated
/// trajectory visits.
pub const KL_EPSILON: f64 = 1e-7;

/// Relative margin added on each side of the reference bounding box.
pub const BOX_MARGIN: f64 = 0.05;

/// Width in bins of the Gaussian kernel smoothing power spectra.
pub const SPECTRUM_SMOOTHING: f64 = 2.0;

/// Bins per dimension used by default: 30 up to three dimensions, 5 above.
pub fn default_bins_per_dim(n: usize) -> usize {
    if n <= 3 {
        30
    } else {
        5
    }
}

/// Axis-aligned grid over a box, `bins_per_dim` cells per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub bins_per_dim: usize,
}

impl Grid {
    /// Bounding box of `reference` widened by [`BOX_MARGIN`] of its extent.
    /// Flat axes get a margin of 5% of their magnitude (at least 0.05).
    pub fn around(reference: &Trajectory, bins_per_dim: usize) -> Self {
        let n = reference.dim();
        let mut lo = vec![f64::INFINITY; n];
        let mut hi = vec![f64::NEG_INFINITY; n];
        for t in 0..reference.len() {
            for (i, &x) in reference.row(t).iter().enumerate() {
                lo[i] = lo[i].min(x);
                hi[i] = hi[i].max(x);
            }
        }
        for i in 0..n {
            let width = hi[i] - lo[i];
            let pad = if width > 0.0 {
                BOX_MARGIN * width
            } else {
                BOX_MARGIN * abs(lo[i]).max(1.0)
            };
            lo[i] -= pad;
            hi[i] += pad;
        }
        Self { lo, hi, bins_per_dim }
    }

    /// Cell of one coordinate, clamped to the edge cells.
    pub fn axis_bin(&self, i: usize, x: f64) -> usize {
        let m = self.bins_per_dim;
        let f = (x - self.lo[i]) / (self.hi[i] - self.lo[i]) * m as f64;
        if !(f > 0.0) {
            0
        } else if f >= m as f64 {
            m - 1
        } else {
            floor(f) as usize
        }
    }

    /// Flat cell index, first dimension most significant.
    pub fn bin(&self, x: &[f64]) -> u64 {
        x.iter()
            .enumerate()
            .fold(0u64, |acc, (i, &v)| acc * self.bins_per_dim as u64 + self.axis_bin(i, v) as u64)
    }
}

/// Sparse occupancy counts as `(cell, count)` sorted by cell.
pub fn histogram(traj: &Trajectory, grid: &Grid) -> Vec<(u64, u64)> {
    let mut cells: Vec<u64> = (0..traj.len()).map(|t| grid.bin(traj.row(t))).collect();
    cells.sort_unstable();
    let mut out: Vec<(u64, u64)> = Vec::new();
    for c in cells {
        match out.last_mut() {
            Some((last, n)) if *last == c => *n += 1,
            _ => out.push((c, 1)),
        }
    }
    out
}

/// `KL(p_gen ‖ p_true)` over sparse counts. Generated mass in cells the
/// reference never visits is compared against [`KL_EPSILON`], after which the
/// reference distribution is renormalized.
pub fn kl_from_histograms(gen: &[(u64, u64)], reference: &[(u64, u64)]) -> f64 {
    let n_gen: u64 = gen.iter().map(|c| c.1).sum();
    let n_ref: u64 = reference.iter().map(|c| c.1).sum();
    if n_gen == 0 || n_ref == 0 {
        return 0.0;
    }
    let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(gen.len());
    let mut r = 0;
    let mut n_floor = 0usize;
    for &(cell, count) in gen {
        while r < reference.len() && reference[r].0 < cell {
            r += 1;
        }
        let p = count as f64 / n_gen as f64;
        if r < reference.len() && reference[r].0 == cell {
            pairs.push((p, reference[r].1 as f64 / n_ref as f64));
        } else {
            n_floor += 1;
            pairs.push((p, KL_EPSILON));
        }
    }
    let z = 1.0 + KL_EPSILON * n_floor as f64;
    pairs.iter().map(|&(p, q)| p * ln(p * z / q)).sum::<f64>().max(0.0)
}

fn check_dims(a: &Trajectory, b: &Trajectory) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("dimension {} versus {}", a.dim(), b.dim())));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    Ok(())
}

/// Binned KL divergence of the generated from the reference occupation measure.
pub fn state_space_divergence(generated: &Trajectory, reference: &Trajectory, bins_per_dim: usize) -> Result<f64> {
    check_dims(generated, reference)?;
    if bins_per_dim == 0 {
        return Err(Error::InvalidArgument("bins_per_dim must be positive".into()));
    }
    let grid = Grid::around(reference, bins_per_dim);
    Ok(kl_from_histograms(&histogram(generated, &grid), &histogram(reference, &grid)))
}

/// Normalized one-sided power spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    /// Frequencies `0 … ⌊T/2⌋`, summing to one.
    pub values: Vec<f64>,
    /// Set when the series had no variance; `values` is then uniform.
    pub constant: bool,
}

/// `|FFT|²` of the mean-removed series over nonnegative frequencies, smoothed
/// with a Gaussian kernel of `smoothing` bins (0 disables) and normalized.
pub fn power_spectrum(series: &[f64], smoothing: f64) -> Result<Spectrum> {
    let t = series.len();
    if t < 2 {
        return Err(Error::InvalidArgument("power spectrum needs at least two samples".into()));
    }
    if !series.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite sample".into()));
    }
    let mean = series.iter().sum::<f64>() / t as f64;
    let centered: Vec<f64> = series.iter().map(|x| x - mean).collect();
    let k = t / 2 + 1;
    let uniform = || Spectrum {
        values: vec![1.0 / k as f64; k],
        constant: true,
    };
    if centered.iter().all(|&x| x == 0.0) {
        return Ok(uniform());
    }
    let x = fft_real(&centered);
    let mut power: Vec<f64> = x[..k].iter().map(|c| c.norm_sqr()).collect();
    if smoothing > 0.0 {
        power = gaussian_smooth(&power, smoothing);
    }
    let total: f64 = power.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Ok(uniform());
    }
    power.iter_mut().for_each(|p| *p /= total);
    Ok(Spectrum {
        values: power,
        constant: false,
    })
}

/// Gaussian smoothing truncated at four widths, renormalized at the edges.
fn gaussian_smooth(x: &[f64], sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma) as usize;
    let kernel: Vec<f64> = (0..=radius)
        .map(|d| exp(-0.5 * (d as f64 / sigma) * (d as f64 / sigma)))
        .collect();
    let n = x.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius).min(n - 1);
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (j, &xj) in x.iter().enumerate().take(hi + 1).skip(lo) {
                let w = kernel[i.abs_diff(j)];
                acc += w * xj;
                wsum += w;
            }
            acc / wsum
        })
        .collect()
}

/// Hellinger distance between two distributions on the same bins, computed as
/// `sqrt(½ Σ (√p − √q)²)`, which equals `sqrt(1 − Σ √(pq))` for normalized
/// inputs and is exactly zero for identical ones.
pub fn hellinger_from_spectra(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("{} versus {} frequency bins", p.len(), q.len())));
    }
    let h2: f64 = p
        .iter()
        .zip(q)
        .map(|(a, b)| {
            let d = sqrt(*a) - sqrt(*b);
            d * d
        })
        .sum::<f64>()
        * 0.5;
    Ok(sqrt(h2.clamp(0.0, 1.0)))
}

/// Mean over dimensions of the Hellinger distance between smoothed power
/// spectra. Both series are truncated to their common length.
pub fn hellinger_distance(generated: &Trajectory, reference: &Trajectory, smoothing: f64) -> Result<f64> {
    check_dims(generated, reference)?;
    let t = generated.len().min(reference.len());
    let n = generated.dim();
    let mut total = 0.0;
    for i in 0..n {
        let g: Vec<f64> = (0..t).map(|k| generated.row(k)[i]).collect();
        let r: Vec<f64> = (0..t).map(|k| reference.row(k)[i]).collect();
        let pg = power_spectrum(&g, smoothing)?;
        let pr = power_spectrum(&r, smoothing)?;
        total += hellinger_from_spectra(&pg.values, &pr.values)?;
    }
    Ok(total / n as f64)
}

/// Generation and metric settings.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct EvalConfig {
    /// Length of the generated series including the initial state.
    pub n_steps: usize,
    /// Leading samples removed from both series.
    pub transient: usize,
    /// `None` picks [`default_bins_per_dim`].
    pub bins_per_dim: Option<usize>,
    pub smoothing: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_steps: 10_000,
            transient: 1000,
            bins_per_dim: None,
            smoothing: SPECTRUM_SMOOTHING,
        }
    }
}

/// Metrics of one subject. A diverged rollout scores `d_stsp = ∞`, `d_h = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubjectReport {
    pub d_stsp: f64,
    pub d_h: f64,
    pub diverged: bool,
    /// First non-finite step of a diverged rollout.
    pub diverged_step: Option<usize>,
}

impl SubjectReport {
    pub fn diverged(step: usize) -> Self {
        Self {
            d_stsp: f64::INFINITY,
            d_h: 1.0,
            diverged: true,
            diverged_step: Some(step),
        }
    }
}

/// Free-running series of `n_steps` observations starting at the state
/// inferred from `x0`: row 0 is `h(z0)`, row `k` is `h(F^k(z0))`.
pub fn free_run(model: &SubjectModel, x0: &[f64], n_steps: usize) -> Result<Trajectory> {
    if n_steps == 0 {
        return Err(Error::InvalidArgument("n_steps must be positive".into()));
    }
    let z0 = model.teacher_state(x0);
    let first = observe(&z0, &model.obs)?;
    let n = first.len();
    let mut data = Vec::with_capacity(n_steps * n);
    data.extend_from_slice(&first);
    if n_steps > 1 {
        let rest = generate_trajectory(model, &z0, n_steps - 1)?;
        data.extend_from_slice(rest.data().as_slice());
    }
    Trajectory::new(Mat::from_vec(n_steps, n, data)?, 1.0)
}

/// Generates from the first ground-truth state, drops the transient from both
/// series and scores the rest.
pub fn evaluate_subject(model: &SubjectModel, ground_truth: &Trajectory, cfg: &EvalConfig) -> Result<SubjectReport> {
    if ground_truth.len() < cfg.n_steps {
        return Err(Error::InvalidArgument(format!(
            "ground truth has {} samples, evaluation needs {}",
            ground_truth.len(),
            cfg.n_steps
        )));
    }
    if cfg.transient + 2 > cfg.n_steps {
        return Err(Error::InvalidArgument("transient leaves fewer than two samples".into()));
    }
    let generated = match free_run(model, ground_truth.row(0), cfg.n_steps) {
        Ok(g) => g,
        Err(Error::Diverged { step }) => return Ok(SubjectReport::diverged(step)),
        Err(e) => return Err(e),
    };
    let gen = generated.skip(cfg.transient)?;
    let reference = ground_truth.window(0, cfg.n_steps)?.skip(cfg.transient)?;
    let bins = cfg.bins_per_dim.unwrap_or_else(|| default_bins_per_dim(reference.dim()));
    Ok(SubjectReport {
        d_stsp: state_space_divergence(&gen, &reference, bins)?,
        d_h: hellinger_distance(&gen, &reference, cfg.smoothing)?,
        diverged: false,
        diverged_step: None,
    })
}

/// Per-subject metrics of one run plus their medians and MADs.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub subjects: Vec<SubjectReport>,
    pub median_d_stsp: f64,
    pub median_d_h: f64,
    pub mad_d_stsp: f64,
    pub mad_d_h: f64,
    pub n_diverged: usize,
    pub n_steps: usize,
    pub transient: usize,
    pub bins_per_dim: usize,
}

impl MetricsReport {
    /// Summary statistics over `subjects`; infinite sentinels sort last.
    pub fn new(subjects: Vec<SubjectReport>, cfg: &EvalConfig, n_obs: usize) -> Self {
        let ds: Vec<f64> = subjects.iter().map(|s| s.d_stsp).collect();
        let dh: Vec<f64> = subjects.iter().map(|s| s.d_h).collect();
        let finite: Vec<f64> = ds.iter().copied().filter(|v| v.is_finite()).collect();
        Self {
            median_d_stsp: median(&ds),
            median_d_h: median(&dh),
            mad_d_stsp: if finite.is_empty() { f64::NAN } else { mad(&finite) },
            mad_d_h: mad(&dh),
            n_diverged: subjects.iter().filter(|s| s.diverged).count(),
            n_steps: cfg.n_steps,
            transient: cfg.transient,
            bins_per_dim: cfg.bins_per_dim.unwrap_or_else(|| default_bins_per_dim(n_obs)),
            subjects,
        }
    }
}

/// Evaluates every subject model against its ground truth.
pub fn evaluate_models(models: &[SubjectModel], ground_truth: &[Trajectory], cfg: &EvalConfig) -> Result<MetricsReport> {
    if models.len() != ground_truth.len() || models.is_empty() {
        return Err(Error::Shape(format!(
            "{} models for {} ground-truth trajectories",
            models.len(),
            ground_truth.len()
        )));
    }
    let subjects = models
        .iter()
        .zip(ground_truth)
        .map(|(m, gt)| evaluate_subject(m, gt, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::new(subjects, cfg, ground_truth[0].dim()))
}

/// Cross-run summary: per-run medians over subjects, then their median and MAD.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Summary {
    pub median_d_stsp: f64,
    pub mad_d_stsp: f64,
    pub median_d_h: f64,
    pub mad_d_h: f64,
    pub n_runs: usize,
    /// Runs whose median state-space divergence is a divergence sentinel.
    pub n_diverged_runs: usize,
    pub n_diverged_subjects: usize,
}

/// Aggregates runs of per-subject reports. Diverged runs enter the median as
/// `+∞` and are left out of the MAD.
pub fn aggregate(runs: &[Vec<SubjectReport>]) -> Result<Summary> {
    if runs.is_empty() || runs.iter().any(|r| r.is_empty()) {
        return Err(Error::InvalidArgument("aggregate needs nonempty runs".into()));
    }
    let mut ds = Vec::with_capacity(runs.len());
    let mut dh = Vec::with_capacity(runs.len());
    let mut n_div_subjects = 0;
    for run in runs {
        let s: Vec<f64> = run.iter().map(|r| r.d_stsp).collect();
        let h: Vec<f64> = run.iter().map(|r| r.d_h).collect();
        ds.push(median(&s));
        dh.push(median(&h));
        n_div_subjects += run.iter().filter(|r| r.diverged).count();
    }
    let finite: Vec<usize> = (0..runs.len()).filter(|&k| ds[k].is_finite()).collect();
    if finite.is_empty() {
        return Err(Error::AllDiverged);
    }
    let ds_f: Vec<f64> = finite.iter().map(|&k| ds[k]).collect();
    let dh_f: Vec<f64> = finite.iter().map(|&k| dh[k]).collect();
    Ok(Summary {
        median_d_stsp: median(&ds),
        mad_d_stsp: mad(&ds_f),
        median_d_h: median(&dh),
        mad_d_h: mad(&dh_f),
        n_runs: runs.len(),
        n_diverged_runs: runs.len() - finite.len(),
        n_diverged_subjects: n_div_subjects,
    })
}
