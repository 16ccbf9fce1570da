//! Benchmark ODE systems, fixed-step integration, the observation-noise
//! protocol and multi-subject cohorts.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::linalg::Mat;
use crate::math::{abs, sqrt};
use crate::rng::{stream, Purpose};
use crate::{Error, Result};

pub mod presets;

/// RK4 substeps per output interval.
pub const SUBSTEPS: usize = 10;

/// Samples discarded before recording when a cohort is generated.
pub const DEFAULT_TRANSIENT: usize = 1000;

/// The four benchmark flows.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "system", rename_all = "snake_case"))]
pub enum SystemParams {
    Lorenz63 { sigma: f64, rho: f64, beta: f64 },
    Rossler { a: f64, b: f64, c: f64 },
    Lorenz96 { n_dims: usize, forcing: f64 },
    Chua { alpha: f64, beta: f64, m0: f64, m1: f64 },
}

impl SystemParams {
    pub const fn lorenz63_standard() -> Self {
        SystemParams::Lorenz63 {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
        }
    }

    pub const fn rossler_standard() -> Self {
        SystemParams::Rossler {
            a: 0.2,
            b: 0.2,
            c: 5.7,
        }
    }

    pub const fn chua_standard() -> Self {
        SystemParams::Chua {
            alpha: 9.0,
            beta: 14.0,
            m0: -1.143,
            m1: -0.714,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            SystemParams::Lorenz96 { n_dims, .. } => *n_dims,
            _ => 3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SystemParams::Lorenz63 { .. } => "lorenz63",
            SystemParams::Rossler { .. } => "rossler",
            SystemParams::Lorenz96 { .. } => "lorenz96",
            SystemParams::Chua { .. } => "chua",
        }
    }

    /// Parameter values in declaration order.
    pub fn values(&self) -> Vec<f64> {
        match *self {
            SystemParams::Lorenz63 { sigma, rho, beta } => vec![sigma, rho, beta],
            SystemParams::Rossler { a, b, c } => vec![a, b, c],
            SystemParams::Lorenz96 { n_dims, forcing } => vec![n_dims as f64, forcing],
            SystemParams::Chua { alpha, beta, m0, m1 } => vec![alpha, beta, m0, m1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.values().iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidSystem(format!("non-finite parameter in {self:?}")));
        }
        if let SystemParams::Lorenz96 { n_dims, .. } = self {
            if *n_dims < 4 {
                return Err(Error::InvalidSystem(format!(
                    "lorenz96 needs at least 4 coordinates, got {n_dims}"
                )));
            }
        }
        Ok(())
    }

    /// Writes the vector field at `x` into `dx`.
    pub fn derivative(&self, x: &[f64], dx: &mut [f64]) {
        match *self {
            SystemParams::Lorenz63 { sigma, rho, beta } => {
                dx[0] = sigma * (x[1] - x[0]);
                dx[1] = x[0] * (rho - x[2]) - x[1];
                dx[2] = x[0] * x[1] - beta * x[2];
            }
            SystemParams::Rossler { a, b, c } => {
                dx[0] = -x[1] - x[2];
                dx[1] = x[0] + a * x[1];
                dx[2] = b + x[2] * (x[0] - c);
            }
            SystemParams::Lorenz96 { n_dims: n, forcing } => {
                for i in 0..n {
                    let xp1 = x[(i + 1) % n];
                    let xm1 = x[(i + n - 1) % n];
                    let xm2 = x[(i + n - 2) % n];
                    dx[i] = (xp1 - xm2) * xm1 - x[i] + forcing;
                }
            }
            SystemParams::Chua { alpha, beta, m0, m1 } => {
                let f = m1 * x[0] + 0.5 * (m0 - m1) * (abs(x[0] + 1.0) - abs(x[0] - 1.0));
                dx[0] = alpha * (x[1] - x[0] - f);
                dx[1] = x[0] - x[1] + x[2];
                dx[2] = -beta * x[1];
            }
        }
    }

    /// Draws an initial condition uniformly from the per-system box:
    /// Lorenz-63 `[-10,10]² × [0,40]`, Rössler `[-5,5]² × [0,1]`,
    /// Lorenz-96 `F + [-1,1]^N`, Chua `[-0.5,0.5]³`.
    pub fn sample_initial_condition(&self, rng: &mut impl rand::Rng) -> Vec<f64> {
        let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
        match *self {
            SystemParams::Lorenz63 { .. } => vec![u(-10.0, 10.0), u(-10.0, 10.0), u(0.0, 40.0)],
            SystemParams::Rossler { .. } => vec![u(-5.0, 5.0), u(-5.0, 5.0), u(0.0, 1.0)],
            SystemParams::Lorenz96 { n_dims, forcing } => {
                (0..n_dims).map(|_| forcing + u(-1.0, 1.0)).collect()
            }
            SystemParams::Chua { .. } => vec![u(-0.5, 0.5), u(-0.5, 0.5), u(-0.5, 0.5)],
        }
    }
}

/// A `T × N` block of samples taken every `dt` time units.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    data: Mat,
    dt: f64,
}

impl Trajectory {
    pub fn new(data: Mat, dt: f64) -> Result<Self> {
        if data.rows() == 0 || data.cols() == 0 {
            return Err(Error::Shape("trajectory must have T >= 1 and N >= 1".into()));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        if !data.is_finite() {
            return Err(Error::InvalidArgument("trajectory contains non-finite values".into()));
        }
        Ok(Self { data, dt })
    }

    pub fn from_rows(rows: &[Vec<f64>], dt: f64) -> Result<Self> {
        Self::new(Mat::from_rows(rows)?, dt)
    }

    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.data.row(t)
    }

    pub fn data(&self) -> &Mat {
        &self.data
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.data.column(i)
    }

    /// Rows `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> Result<Trajectory> {
        if len == 0 || start + len > self.len() {
            return Err(Error::InvalidArgument(format!(
                "window {start}..{} outside trajectory of length {}",
                start + len,
                self.len()
            )));
        }
        let n = self.dim();
        let data = self.data.as_slice()[start * n..(start + len) * n].to_vec();
        Ok(Self {
            data: Mat::from_vec(len, n, data)?,
            dt: self.dt,
        })
    }

    /// Drops the first `n` rows.
    pub fn skip(&self, n: usize) -> Result<Trajectory> {
        self.window(n, self.len().saturating_sub(n))
    }

    /// Per-dimension mean and unbiased variance.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.dim();
        let t = self.len() as f64;
        let mut mean = vec![0.0; n];
        for r in 0..self.len() {
            for (m, v) in mean.iter_mut().zip(self.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= t);
        let mut var = vec![0.0; n];
        if self.len() > 1 {
            for r in 0..self.len() {
                for ((s, v), m) in var.iter_mut().zip(self.row(r)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= t - 1.0);
        }
        (mean, var)
    }
}

fn rk4_step(system: &SystemParams, x: &mut [f64], h: f64, k: &mut [Vec<f64>; 5]) {
    let n = x.len();
    let [k1, k2, k3, k4, tmp] = k;
    system.derivative(x, k1);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k1[i];
    }
    system.derivative(tmp, k2);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k2[i];
    }
    system.derivative(tmp, k3);
    for i in 0..n {
        tmp[i] = x[i] + h * k3[i];
    }
    system.derivative(tmp, k4);
    for i in 0..n {
        x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

/// Integrates `system` from `x0` with classical RK4 ([`SUBSTEPS`] substeps per
/// output interval). Sample `k` is the state at time `(transient_steps + k)·dt`,
/// so with no transient the first row is `x0` itself.
pub fn integrate(
    system: &SystemParams,
    x0: &[f64],
    dt: f64,
    n_steps: usize,
    transient_steps: usize,
) -> Result<Trajectory> {
    system.validate()?;
    let n = system.dim();
    if x0.len() != n {
        return Err(Error::Shape(format!(
            "initial condition has {} entries, {} expects {n}",
            x0.len(),
            system.name()
        )));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    if n_steps == 0 {
        return Err(Error::InvalidArgument("n_steps must be at least 1".into()));
    }
    let h = dt / SUBSTEPS as f64;
    let mut x = x0.to_vec();
    let mut scratch = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut out = Vec::with_capacity(n_steps * n);
    for step in 0..transient_steps + n_steps {
        if step > 0 {
            for _ in 0..SUBSTEPS {
                rk4_step(system, &mut x, h, &mut scratch);
            }
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::Diverged { step });
            }
        }
        if step >= transient_steps {
            out.extend_from_slice(&x);
        }
    }
    Trajectory::new(Mat::from_vec(n_steps, n, out)?, dt)
}

/// Adds zero-mean Gaussian noise whose per-dimension variance is `fraction`
/// times that dimension's sample variance.
pub fn add_observation_noise(traj: &Trajectory, fraction: f64, seed: u64) -> Result<Trajectory> {
    add_observation_noise_for_subject(traj, fraction, seed, 0)
}

/// As [`add_observation_noise`], drawing from the `(seed, subject, dim)` streams.
pub fn add_observation_noise_for_subject(
    traj: &Trajectory,
    fraction: f64,
    seed: u64,
    subject: u32,
) -> Result<Trajectory> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "noise fraction must lie in [0, 1), got {fraction}"
        )));
    }
    if fraction == 0.0 {
        return Ok(traj.clone());
    }
    let (_, var) = traj.moments();
    let n = traj.dim();
    let mut data = traj.data.clone();
    for (i, v) in var.iter().enumerate() {
        let sd = sqrt(fraction * v);
        if sd == 0.0 {
            continue;
        }
        let mut rng = stream(seed, subject, Purpose::ObservationNoise(i as u32));
        for t in 0..traj.len() {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.as_mut_slice()[t * n + i] += sd * z;
        }
    }
    Trajectory::new(data, traj.dt)
}

/// Multiple subject trajectories sharing an observation dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub subjects: Vec<Trajectory>,
    pub gt_params: Option<Vec<Vec<f64>>>,
    pub labels: Option<Vec<i64>>,
    /// Generating systems, when the cohort was simulated.
    pub systems: Option<Vec<SystemParams>>,
    /// Seed the cohort was generated with.
    pub seed: Option<u64>,
}

impl Cohort {
    pub fn new(subjects: Vec<Trajectory>) -> Result<Self> {
        let c = Self {
            subjects,
            gt_params: None,
            labels: None,
            systems: None,
            seed: None,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.subjects.first() else {
            return Err(Error::InvalidArgument("cohort has no subjects".into()));
        };
        let n = first.dim();
        if let Some(j) = self.subjects.iter().position(|s| s.dim() != n) {
            return Err(Error::Shape(format!(
                "subject {j} has dimension {}, cohort dimension is {n}",
                self.subjects[j].dim()
            )));
        }
        let s = self.subjects.len();
        if self.gt_params.as_ref().is_some_and(|g| g.len() != s) {
            return Err(Error::Shape("gt_params length differs from subject count".into()));
        }
        if self.labels.as_ref().is_some_and(|l| l.len() != s) {
            return Err(Error::Shape("labels length differs from subject count".into()));
        }
        if self.systems.as_ref().is_some_and(|l| l.len() != s) {
            return Err(Error::Shape("systems length differs from subject count".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.subjects.first().map_or(0, Trajectory::dim)
    }

    /// Subset of subjects, carrying metadata along.
    pub fn select(&self, idx: &[usize]) -> Cohort {
        Cohort {
            subjects: idx.iter().map(|&i| self.subjects[i].clone()).collect(),
            gt_params: self
                .gt_params
                .as_ref()
                .map(|g| idx.iter().map(|&i| g[i].clone()).collect()),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            systems: self.systems.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            seed: self.seed,
        }
    }
}

/// One subject of a simulated cohort.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SubjectSpec {
    pub system: SystemParams,
    pub t_max: usize,
    /// Control parameters recorded as ground truth.
    pub gt_params: Vec<f64>,
    pub label: Option<i64>,
}

/// Recipe for [`generate_cohort`].
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CohortSpec {
    pub name: String,
    pub subjects: Vec<SubjectSpec>,
    pub dt: f64,
    pub transient_steps: usize,
    pub noise_fraction: f64,
    pub seed: u64,
}

impl CohortSpec {
    /// Same recipe with every subject's length replaced.
    pub fn with_t_max(mut self, t_max: usize) -> Self {
        self.subjects.iter_mut().for_each(|s| s.t_max = t_max);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Simulates one clean trajectory for subject `j` of `spec`, `n_steps` long.
pub fn simulate_subject(spec: &CohortSpec, j: usize, n_steps: usize) -> Result<Trajectory> {
    let s = &spec.subjects[j];
    let mut rng = stream(spec.seed, j as u32, Purpose::InitialCondition);
    let x0 = s.system.sample_initial_condition(&mut rng);
    integrate(&s.system, &x0, spec.dt, n_steps, spec.transient_steps).map_err(|e| match e {
        Error::Diverged { step } => Error::SubjectDiverged { subject: j, step },
        other => other,
    })
}

/// Generates one noisy trajectory per subject of `spec`.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Cohort> {
    if spec.subjects.is_empty() {
        return Err(Error::InvalidArgument("cohort spec lists no subjects".into()));
    }
    let mut subjects = Vec::with_capacity(spec.subjects.len());
    for (j, s) in spec.subjects.iter().enumerate() {
        let clean = simulate_subject(spec, j, s.t_max)?;
        subjects.push(add_observation_noise_for_subject(
            &clean,
            spec.noise_fraction,
            spec.seed,
            j as u32,
        )?);
    }
    let labels = if spec.subjects.iter().all(|s| s.label.is_some()) {
        Some(spec.subjects.iter().map(|s| s.label.unwrap_or_default()).collect())
    } else {
        None
    };
    let cohort = Cohort {
        subjects,
        gt_params: Some(spec.subjects.iter().map(|s| s.gt_params.clone()).collect()),
        labels,
        systems: Some(spec.subjects.iter().map(|s| s.system).collect()),
        seed: Some(spec.seed),
    };
    cohort.validate()?;
    Ok(cohort)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum StandardizeMode {
    /// Separate statistics for each subject and dimension.
    PerSubjectDimension,
    /// Statistics per dimension pooled over all subjects.
    Global,
}

/// Everything needed to apply or undo a standardization.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScalingRecord {
    pub mode: StandardizeMode,
    /// One row per subject (per-subject mode) or a single row (global mode).
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<Vec<f64>>,
    /// `true` where the variance was zero and the dimension was only centered.
    pub zero_variance: Vec<Vec<bool>>,
}

impl ScalingRecord {
    fn row(&self, subject: usize) -> usize {
        match self.mode {
            StandardizeMode::PerSubjectDimension => subject,
            StandardizeMode::Global => 0,
        }
    }

    pub fn apply(&self, traj: &Trajectory, subject: usize) -> Result<Trajectory> {
        let r = self.row(subject);
        let (mean, sd) = (&self.means[r], &self.stds[r]);
        map_rows(traj, |i, v| (v - mean[i]) / sd[i])
    }

    pub fn invert(&self, traj: &Trajectory, subject: usize) -> Result<Trajectory> {
        let r = self.row(subject);
        let (mean, sd) = (&self.means[r], &self.stds[r]);
        map_rows(traj, |i, v| v * sd[i] + mean[i])
    }

    /// Maps a single raw value of dimension `i`.
    pub fn apply_value(&self, subject: usize, i: usize, v: f64) -> f64 {
        let r = self.row(subject);
        (v - self.means[r][i]) / self.stds[r][i]
    }
}

fn map_rows(traj: &Trajectory, f: impl Fn(usize, f64) -> f64) -> Result<Trajectory> {
    let n = traj.dim();
    let data: Vec<f64> = traj
        .data
        .as_slice()
        .iter()
        .enumerate()
        .map(|(k, &v)| f(k % n, v))
        .collect();
    Trajectory::new(Mat::from_vec(traj.len(), n, data)?, traj.dt)
}

fn stats_to_scale(mean: Vec<f64>, var: Vec<f64>) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let flags: Vec<bool> = var.iter().map(|&v| !(v > 0.0)).collect();
    let sd = var
        .iter()
        .zip(&flags)
        .map(|(&v, &z)| if z { 1.0 } else { sqrt(v) })
        .collect();
    (mean, sd, flags)
}

/// Standardizes a cohort to zero mean and unit variance per subject and
/// dimension, or per dimension across the whole cohort.
pub fn standardize(cohort: &Cohort, mode: StandardizeMode) -> Result<(Cohort, ScalingRecord)> {
    cohort.validate()?;
    let n = cohort.dim();
    let (means, stds, zero_variance) = match mode {
        StandardizeMode::PerSubjectDimension => {
            let mut means = Vec::new();
            let mut stds = Vec::new();
            let mut flags = Vec::new();
            for s in &cohort.subjects {
                let (m, v) = s.moments();
                let (m, sd, z) = stats_to_scale(m, v);
                means.push(m);
                stds.push(sd);
                flags.push(z);
            }
            (means, stds, flags)
        }
        StandardizeMode::Global => {
            let total: usize = cohort.subjects.iter().map(Trajectory::len).sum();
            let mut mean = vec![0.0; n];
            for s in &cohort.subjects {
                for t in 0..s.len() {
                    for (m, v) in mean.iter_mut().zip(s.row(t)) {
                        *m += v;
                    }
                }
            }
            mean.iter_mut().for_each(|m| *m /= total as f64);
            let mut var = vec![0.0; n];
            for s in &cohort.subjects {
                for t in 0..s.len() {
                    for ((a, v), m) in var.iter_mut().zip(s.row(t)).zip(&mean) {
                        *a += (v - m) * (v - m);
                    }
                }
            }
            let denom = (total.max(2) - 1) as f64;
            var.iter_mut().for_each(|a| *a /= denom);
            let (m, sd, z) = stats_to_scale(mean, var);
            (vec![m], vec![sd], vec![z])
        }
    };
    let record = ScalingRecord {
        mode,
        means,
        stds,
        zero_variance,
    };
    let subjects = cohort
        .subjects
        .iter()
        .enumerate()
        .map(|(j, s)| record.apply(s, j))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        Cohort {
            subjects,
            ..cohort.clone()
        },
        record,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn lorenz_rhs(x: &[f64; 3]) -> [f64; 3] {
        let (s, r, b) = (10.0, 28.0, 8.0 / 3.0);
        [s * (x[1] - x[0]), x[0] * (r - x[2]) - x[1], x[0] * x[1] - b * x[2]]
    }

    /// Plain RK4 at a very fine step, written independently of the library path.
    fn fine_reference(x0: [f64; 3], t_end: f64, h: f64) -> [f64; 3] {
        let steps = libm::round(t_end / h) as usize;
        let mut x = x0;
        let add = |a: &[f64; 3], b: &[f64; 3], c: f64| [a[0] + c * b[0], a[1] + c * b[1], a[2] + c * b[2]];
        for _ in 0..steps {
            let k1 = lorenz_rhs(&x);
            let k2 = lorenz_rhs(&add(&x, &k1, h / 2.0));
            let k3 = lorenz_rhs(&add(&x, &k2, h / 2.0));
            let k4 = lorenz_rhs(&add(&x, &k3, h));
            for i in 0..3 {
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        x
    }

    #[test]
    fn origin_is_a_lorenz_fixed_point() {
        let tr = integrate(&SystemParams::lorenz63_standard(), &[0.0; 3], 0.01, 50, 0).unwrap();
        assert!(tr.data().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lorenz96_forcing_equilibrium_is_preserved() {
        let sys = SystemParams::Lorenz96 {
            n_dims: 6,
            forcing: 8.0,
        };
        let tr = integrate(&sys, &[8.0; 6], 0.01, 100, 0).unwrap();
        assert!(tr.data().as_slice().iter().all(|&v| v == 8.0));
    }

    #[test]
    fn one_step_matches_fine_reference() {
        let tr = integrate(&SystemParams::lorenz63_standard(), &[1.0, 1.0, 1.0], 0.01, 2, 0).unwrap();
        let reference = fine_reference([1.0, 1.0, 1.0], 0.01, 1e-5);
        for i in 0..3 {
            assert_abs_diff_eq!(tr.row(1)[i], reference[i], epsilon = 1e-8);
        }
        assert_eq!(tr.row(0), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn standard_lorenz_stays_bounded() {
        let mut rng = stream(11, 0, Purpose::InitialCondition);
        let sys = SystemParams::lorenz63_standard();
        let x0 = sys.sample_initial_condition(&mut rng);
        let tr = integrate(&sys, &x0, 0.01, 10_000, 0).unwrap();
        assert!(tr.data().as_slice().iter().all(|v| abs(*v) < 100.0));
    }

    #[test]
    fn divergence_reports_step() {
        // rho huge and negative beta blow up
        let sys = SystemParams::Lorenz63 {
            sigma: 10.0,
            rho: 28.0,
            beta: -50.0,
        };
        let err = integrate(&sys, &[1.0, 1.0, 1.0], 0.01, 100_000, 0).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
    }

    #[test]
    fn rejects_bad_inputs() {
        let sys = SystemParams::Lorenz96 {
            n_dims: 3,
            forcing: 8.0,
        };
        assert!(integrate(&sys, &[0.0; 3], 0.01, 10, 0).is_err());
        let sys = SystemParams::lorenz63_standard();
        assert!(integrate(&sys, &[0.0; 2], 0.01, 10, 0).is_err());
        assert!(integrate(&sys, &[0.0; 3], 0.0, 10, 0).is_err());
        assert!(integrate(&sys, &[0.0; 3], 0.01, 0, 0).is_err());
    }

    #[test]
    fn zero_noise_is_identity() {
        let tr = integrate(&SystemParams::lorenz63_standard(), &[1.0, 2.0, 3.0], 0.01, 100, 0).unwrap();
        assert_eq!(add_observation_noise(&tr, 0.0, 1).unwrap(), tr);
    }

    #[test]
    fn constant_trajectory_gets_no_noise() {
        let tr = Trajectory::from_rows(&vec![vec![2.5, -1.0]; 50], 0.01).unwrap();
        assert_eq!(add_observation_noise(&tr, 0.05, 1).unwrap(), tr);
    }

    #[test]
    fn noise_variance_matches_fraction() {
        let t = 100_000;
        let rows: Vec<Vec<f64>> = (0..t).map(|k| vec![libm::sin(k as f64 * 0.013) * 3.0]).collect();
        let tr = Trajectory::from_rows(&rows, 0.01).unwrap();
        let noisy = add_observation_noise(&tr, 0.05, 42).unwrap();
        let diff: Vec<f64> = (0..t).map(|k| noisy.row(k)[0] - tr.row(k)[0]).collect();
        let (_, var) = tr.moments();
        let ratio = crate::math::variance(&diff) / (0.05 * var[0]);
        assert!((ratio - 1.0).abs() < 0.02, "ratio {ratio}");
    }

    #[test]
    fn standardize_is_idempotent_on_standardized_input() {
        let rows: Vec<Vec<f64>> = (0..200).map(|k| vec![libm::sin(k as f64 * 0.1), k as f64]).collect();
        let c = Cohort::new(vec![Trajectory::from_rows(&rows, 0.01).unwrap()]).unwrap();
        let (once, _) = standardize(&c, StandardizeMode::PerSubjectDimension).unwrap();
        let (twice, _) = standardize(&once, StandardizeMode::PerSubjectDimension).unwrap();
        for (a, b) in once.subjects[0]
            .data()
            .as_slice()
            .iter()
            .zip(twice.subjects[0].data().as_slice())
        {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_dimension_is_centered_and_flagged() {
        let rows: Vec<Vec<f64>> = (0..10).map(|k| vec![k as f64, 4.0]).collect();
        let c = Cohort::new(vec![Trajectory::from_rows(&rows, 0.01).unwrap()]).unwrap();
        let (s, rec) = standardize(&c, StandardizeMode::PerSubjectDimension).unwrap();
        assert_eq!(rec.zero_variance[0], vec![false, true]);
        assert!(s.subjects[0].column(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_subject_statistics_match_direct_computation() {
        let a: Vec<Vec<f64>> = [1.0, 2.0, 3.0, 6.0].iter().map(|&v| vec![v]).collect();
        let b: Vec<Vec<f64>> = [10.0, 10.0, 14.0, 14.0].iter().map(|&v| vec![v]).collect();
        let c = Cohort::new(vec![
            Trajectory::from_rows(&a, 1.0).unwrap(),
            Trajectory::from_rows(&b, 1.0).unwrap(),
        ])
        .unwrap();
        let (s, rec) = standardize(&c, StandardizeMode::PerSubjectDimension).unwrap();
        // subject a: mean 3, unbiased variance (4+1+0+9)/3
        assert_abs_diff_eq!(rec.means[0][0], 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(rec.stds[0][0], libm::sqrt(14.0 / 3.0), epsilon = 1e-15);
        assert_abs_diff_eq!(rec.means[1][0], 12.0, epsilon = 1e-15);
        assert_abs_diff_eq!(rec.stds[1][0], libm::sqrt(16.0 / 3.0), epsilon = 1e-15);
        let back = rec.invert(&s.subjects[1], 1).unwrap();
        assert_abs_diff_eq!(back.row(2)[0], 14.0, epsilon = 1e-12);

        let (g, grec) = standardize(&c, StandardizeMode::Global).unwrap();
        // pooled mean 7.5, pooled unbiased variance
        let vals = [1.0, 2.0, 3.0, 6.0, 10.0, 10.0, 14.0, 14.0];
        assert_abs_diff_eq!(grec.means[0][0], 7.5, epsilon = 1e-15);
        assert_abs_diff_eq!(grec.stds[0][0], libm::sqrt(crate::math::variance(&vals)), epsilon = 1e-12);
        assert_abs_diff_eq!(g.subjects[0].row(0)[0], (1.0 - 7.5) / grec.stds[0][0], epsilon = 1e-12);
    }
}
