use alloc::vec::Vec;

use crate::linalg::{dot, norm, Mat};
use crate::math::{abs, sqrt};
use crate::{Error, Result};

/// Agreement of feature geometry across independently trained runs.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Robustness {
    pub mean: f64,
    /// Sample standard deviation over run pairs (0 for a single pair).
    pub sd: f64,
    /// Correlation for every run pair `(a, b)`, `a < b`, in lexicographic order.
    pub pair_correlations: Vec<f64>,
    /// Subject pairs left out because a feature vector had zero norm.
    pub excluded_pairs: usize,
}

/// `S × S` cosine similarities of the rows; entries involving a zero row are NaN.
pub fn cosine_similarity_matrix(features: &Mat) -> Mat {
    let s = features.rows();
    let norms: Vec<f64> = (0..s).map(|r| norm(features.row(r))).collect();
    let mut out = Mat::zeros(s, s);
    for a in 0..s {
        for b in 0..s {
            out[(a, b)] = if norms[a] > 0.0 && norms[b] > 0.0 {
                (dot(features.row(a), features.row(b)) / (norms[a] * norms[b])).clamp(-1.0, 1.0)
            } else {
                f64::NAN
            };
        }
    }
    out
}

/// Pearson correlation. Two constant inputs correlate 1 when equal and 0
/// otherwise; one constant input correlates 0.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    let tol = 1e-24 * n;
    match (sxx <= tol, syy <= tol) {
        (true, true) => {
            if x.iter().zip(y).all(|(a, b)| abs(a - b) <= 1e-12) {
                1.0
            } else {
                0.0
            }
        }
        (true, false) | (false, true) => 0.0,
        (false, false) => (sxy / sqrt(sxx * syy)).clamp(-1.0, 1.0),
    }
}

/// Correlates the upper triangles of each run's cosine-similarity matrix over
/// all run pairs.
pub fn feature_robustness(runs: &[Mat]) -> Result<Robustness> {
    if runs.len() < 2 {
        return Err(Error::InvalidArgument("robustness needs at least two runs".into()));
    }
    let s = runs[0].rows();
    if s < 2 || runs.iter().any(|r| r.rows() != s) {
        return Err(Error::Shape("runs must share a subject count of at least two".into()));
    }
    let sims: Vec<Mat> = runs.iter().map(cosine_similarity_matrix).collect();
    let mut pair_correlations = Vec::new();
    let mut excluded = 0;
    for a in 0..runs.len() {
        for b in a + 1..runs.len() {
            let mut x = Vec::new();
            let mut y = Vec::new();
            for i in 0..s {
                for j in i + 1..s {
                    let (u, v) = (sims[a][(i, j)], sims[b][(i, j)]);
                    if u.is_nan() || v.is_nan() {
                        excluded += 1;
                    } else {
                        x.push(u);
                        y.push(v);
                    }
                }
            }
            pair_correlations.push(if x.is_empty() { f64::NAN } else { pearson(&x, &y) });
        }
    }
    let valid: Vec<f64> = pair_correlations.iter().copied().filter(|v| !v.is_nan()).collect();
    if valid.is_empty() {
        return Err(Error::InvalidArgument("no subject pair with nonzero features".into()));
    }
    let k = valid.len() as f64;
    let mean = valid.iter().sum::<f64>() / k;
    let sd = if valid.len() > 1 {
        sqrt(valid.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1.0))
    } else {
        0.0
    };
    Ok(Robustness {
        mean,
        sd,
        pair_correlations,
        excluded_pairs: excluded,
    })
}
