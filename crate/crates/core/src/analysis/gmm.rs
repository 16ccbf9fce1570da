use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::index::sample;
use rand::Rng as _;

use crate::linalg::Mat;
use crate::math::{abs, exp, ln};
use crate::rng::{stream, Purpose};
use crate::{Error, Result};

/// Smallest admissible component variance; anything below triggers a re-draw
/// of that component.
pub const COVARIANCE_FLOOR: f64 = 1e-6;

const MAX_ITERS: usize = 500;
const TOL: f64 = 1e-6;
const MAX_REINITS: usize = 20;

/// Mixture of axis-aligned Gaussians.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GmmModel {
    pub weights: Vec<f64>,
    /// `K × d`
    pub means: Mat,
    /// `K × d` diagonal variances.
    pub variances: Mat,
}

impl GmmModel {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    /// `ln(w_k N(x | μ_k, diag σ²_k))` for every component.
    fn log_joint(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        for (k, o) in out.iter_mut().enumerate() {
            let mut acc = ln(self.weights[k]) - 0.5 * d as f64 * ln(2.0 * PI);
            for i in 0..d {
                let v = self.variances[(k, i)];
                let e = x[i] - self.means[(k, i)];
                acc -= 0.5 * (ln(v) + e * e / v);
            }
            *o = acc;
        }
    }

    /// Responsibilities of each component for `x` and the point's log-likelihood.
    pub fn responsibilities(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let mut lj = vec![0.0; self.k()];
        self.log_joint(x, &mut lj);
        let lse = log_sum_exp(&lj);
        (lj.iter().map(|v| exp(v - lse)).collect(), lse)
    }

    /// Total log-likelihood of the rows of `data`.
    pub fn log_likelihood(&self, data: &Mat) -> f64 {
        (0..data.rows()).map(|r| self.responsibilities(data.row(r)).1).sum()
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ln(v.iter().map(|x| exp(x - m)).sum::<f64>())
}

/// Result of [`gmm_fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub model: GmmModel,
    pub log_likelihood: f64,
    /// Mean per-point log-likelihood after every EM iteration of the best restart.
    pub history: Vec<f64>,
    /// Iterations (indices into `history`) after which a collapsed component
    /// was re-drawn; EM monotonicity holds between these points.
    pub reinit_at: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    pub restart: usize,
}

fn population_variance(data: &Mat) -> Vec<f64> {
    let (s, d) = (data.rows(), data.cols());
    (0..d)
        .map(|c| {
            let m = (0..s).map(|r| data[(r, c)]).sum::<f64>() / s as f64;
            let v = (0..s).map(|r| (data[(r, c)] - m) * (data[(r, c)] - m)).sum::<f64>() / s as f64;
            v.max(COVARIANCE_FLOOR)
        })
        .collect()
}

fn fit_once(data: &Mat, k: usize, seed: u64, restart: u32) -> GmmFit {
    let (s, d) = (data.rows(), data.cols());
    let mut rng = stream(seed, 0, Purpose::Gmm(restart));
    let data_var = population_variance(data);
    let picks = sample(&mut rng, s, k).into_vec();
    let mut model = GmmModel {
        weights: vec![1.0 / k as f64; k],
        means: Mat::from_rows(&picks.iter().map(|&r| data.row(r).to_vec()).collect::<Vec<_>>())
            .expect("rows of equal length"),
        variances: Mat::from_rows(&vec![data_var.clone(); k]).expect("rows of equal length"),
    };
    let mut history = Vec::new();
    let mut reinit_at = Vec::new();
    let mut resp = Mat::zeros(s, k);
    let mut converged = false;
    let mut prev = f64::NEG_INFINITY;
    let mut iterations = 0;
    while iterations < MAX_ITERS {
        // E-step; the log-likelihood belongs to the parameters before the M-step
        let mut ll = 0.0;
        for r in 0..s {
            let (g, l) = model.responsibilities(data.row(r));
            resp.row_mut(r).copy_from_slice(&g);
            ll += l;
        }
        let mean_ll = ll / s as f64;
        if iterations > 0 {
            history.push(mean_ll);
            if abs(mean_ll - prev) < TOL && reinit_at.last() != Some(&(history.len() - 1)) {
                converged = true;
                break;
            }
        }
        prev = mean_ll;
        iterations += 1;
        // M-step
        let mut collapsed = Vec::new();
        for c in 0..k {
            let nk: f64 = (0..s).map(|r| resp[(r, c)]).sum();
            if nk <= 0.0 {
                collapsed.push(c);
                continue;
            }
            model.weights[c] = nk / s as f64;
            for i in 0..d {
                let mu = (0..s).map(|r| resp[(r, c)] * data[(r, i)]).sum::<f64>() / nk;
                model.means[(c, i)] = mu;
            }
            let mut small = false;
            for i in 0..d {
                let mu = model.means[(c, i)];
                let v = (0..s)
                    .map(|r| resp[(r, c)] * (data[(r, i)] - mu) * (data[(r, i)] - mu))
                    .sum::<f64>()
                    / nk;
                if v < COVARIANCE_FLOOR {
                    small = true;
                }
                model.variances[(c, i)] = v.max(COVARIANCE_FLOOR);
            }
            if small {
                collapsed.push(c);
            }
        }
        if !collapsed.is_empty() && reinit_at.len() < MAX_REINITS {
            for &c in &collapsed {
                let r = rng.random_range(0..s);
                model.means.row_mut(c).copy_from_slice(data.row(r));
                model.variances.row_mut(c).copy_from_slice(&data_var);
                model.weights[c] = 1.0 / k as f64;
            }
            let total: f64 = model.weights.iter().sum();
            model.weights.iter_mut().for_each(|w| *w /= total);
            reinit_at.push(history.len());
        }
    }
    let log_likelihood = model.log_likelihood(data);
    GmmFit {
        model,
        log_likelihood,
        history,
        reinit_at,
        iterations,
        converged,
        restart: restart as usize,
    }
}

/// Diagonal-covariance EM, best of `n_init` restarts by log-likelihood.
/// Stops when the mean per-point log-likelihood improves by less than 1e-6
/// or after 500 iterations.
pub fn gmm_fit(data: &Mat, k: usize, n_init: usize, seed: u64) -> Result<GmmFit> {
    if k == 0 || n_init == 0 {
        return Err(Error::InvalidArgument("K and n_init must be positive".into()));
    }
    if data.rows() < k {
        return Err(Error::InvalidArgument(format!("{} points for {k} components", data.rows())));
    }
    if !data.is_finite() || data.cols() == 0 {
        return Err(Error::InvalidArgument("data must be finite with at least one column".into()));
    }
    let mut best: Option<GmmFit> = None;
    for r in 0..n_init {
        let fit = fit_once(data, k, seed, r as u32);
        if best.as_ref().is_none_or(|b| fit.log_likelihood > b.log_likelihood) {
            best = Some(fit);
        }
    }
    Ok(best.expect("n_init > 0"))
}

/// Most responsible component for every row.
pub fn gmm_assign(model: &GmmModel, data: &Mat) -> Vec<usize> {
    let mut lj = vec![0.0; model.k()];
    (0..data.rows())
        .map(|r| {
            model.log_joint(data.row(r), &mut lj);
            let mut best = 0;
            for c in 1..lj.len() {
                if lj[c] > lj[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Maximum-weight perfect matching on a square matrix; returns the column
/// assigned to each row.
pub fn hungarian_max(weights: &Mat) -> Vec<usize> {
    let n = weights.rows();
    debug_assert_eq!(n, weights.cols());
    // Minimization with potentials on cost = −weight, 1-based indexing.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = -weights[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Fraction of points whose cluster maps to their true label under the best
/// one-to-one relabeling of clusters.
pub fn cluster_accuracy(predicted: &[usize], truth: &[i64]) -> Result<f64> {
    if predicted.len() != truth.len() || predicted.is_empty() {
        return Err(Error::Shape("predicted and true labels must be nonempty and of equal length".into()));
    }
    let mut classes: Vec<i64> = truth.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let n_clusters = predicted.iter().max().map_or(0, |m| m + 1);
    let n = n_clusters.max(classes.len());
    let mut counts = Mat::zeros(n, n);
    for (&p, t) in predicted.iter().zip(truth) {
        let c = classes.binary_search(t).expect("class listed");
        counts[(p, c)] += 1.0;
    }
    let assignment = hungarian_max(&counts);
    let matched: f64 = (0..n).map(|r| counts[(r, assignment[r])]).sum();
    Ok(matched / predicted.len() as f64)
}
