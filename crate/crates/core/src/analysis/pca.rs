use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::{Mat, SymmetricEigen};
use crate::math::abs;
use crate::{Error, Result};

/// Principal components of a data matrix (rows are observations).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Column `k` is the `k`-th component; its largest-magnitude loading is positive.
    pub components: Mat,
    /// Eigenvalues of the sample covariance, descending.
    pub variances: Vec<f64>,
    pub explained_ratio: Vec<f64>,
    /// Projections of the centered rows onto the components.
    pub scores: Mat,
}

impl Pca {
    /// Maps scores back to data space.
    pub fn reconstruct(&self) -> Mat {
        let (s, d) = (self.scores.rows(), self.mean.len());
        let mut out = Mat::zeros(s, d);
        for r in 0..s {
            for c in 0..d {
                let mut v = self.mean[c];
                for k in 0..d {
                    v += self.scores[(r, k)] * self.components[(c, k)];
                }
                out[(r, c)] = v;
            }
        }
        out
    }
}

/// PCA via the eigendecomposition of the sample covariance (`S − 1` denominator).
pub fn pca(data: &Mat) -> Result<Pca> {
    let (s, d) = (data.rows(), data.cols());
    if s < 2 || d == 0 {
        return Err(Error::InvalidArgument("PCA needs at least two rows and one column".into()));
    }
    let mean: Vec<f64> = (0..d)
        .map(|c| (0..s).map(|r| data[(r, c)]).sum::<f64>() / s as f64)
        .collect();
    let mut centered = data.clone();
    for r in 0..s {
        for c in 0..d {
            centered[(r, c)] -= mean[c];
        }
    }
    let mut cov = Mat::zeros(d, d);
    for r in 0..s {
        let row = centered.row(r);
        for a in 0..d {
            for b in a..d {
                cov[(a, b)] += row[a] * row[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / (s - 1) as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let eig = SymmetricEigen::new(&cov);
    let mut components = eig.vectors;
    for k in 0..d {
        let mut best = 0;
        for c in 1..d {
            if abs(components[(c, k)]) > abs(components[(best, k)]) {
                best = c;
            }
        }
        if components[(best, k)] < 0.0 {
            for c in 0..d {
                components[(c, k)] = -components[(c, k)];
            }
        }
    }
    let variances: Vec<f64> = eig.values.iter().map(|&v| v.max(0.0)).collect();
    let total: f64 = variances.iter().sum();
    let explained_ratio = if total > 0.0 {
        variances.iter().map(|v| v / total).collect()
    } else {
        vec![0.0; d]
    };
    let mut scores = Mat::zeros(s, d);
    for r in 0..s {
        for k in 0..d {
            scores[(r, k)] = (0..d).map(|c| centered[(r, c)] * components[(c, k)]).sum();
        }
    }
    Ok(Pca {
        mean,
        components,
        variances,
        explained_ratio,
        scores,
    })
}
