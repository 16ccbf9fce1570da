use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::{Mat, SymmetricEigen};
use crate::{Error, Result};

/// Ordinary least squares with intercept.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Regression {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub r_squared: f64,
    pub fitted: Vec<f64>,
    pub residuals: Vec<f64>,
    /// The centered design was singular; the minimum-norm solution is returned.
    pub rank_deficient: bool,
    /// Targets had zero variance; `r_squared` is then 0.
    pub constant_target: bool,
}

impl Regression {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + x.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// Regresses `targets` on the columns of `features`.
pub fn regress_features(features: &Mat, targets: &[f64]) -> Result<Regression> {
    let (s, d) = (features.rows(), features.cols());
    if targets.len() != s {
        return Err(Error::Shape("one target per row required".into()));
    }
    if s < 2 {
        return Err(Error::InvalidArgument("regression needs at least two rows".into()));
    }
    let x_mean: Vec<f64> = (0..d)
        .map(|c| (0..s).map(|r| features[(r, c)]).sum::<f64>() / s as f64)
        .collect();
    let y_mean = targets.iter().sum::<f64>() / s as f64;
    let mut gram = Mat::zeros(d, d);
    let mut xty = vec![0.0; d];
    for r in 0..s {
        let xr: Vec<f64> = (0..d).map(|c| features[(r, c)] - x_mean[c]).collect();
        let yr = targets[r] - y_mean;
        for a in 0..d {
            xty[a] += xr[a] * yr;
            for b in 0..d {
                gram[(a, b)] += xr[a] * xr[b];
            }
        }
    }
    let eig = SymmetricEigen::new(&gram);
    let top = eig.values.first().copied().unwrap_or(0.0).max(0.0);
    let tol = top * d.max(s) as f64 * 1e-12;
    let mut coefficients = vec![0.0; d];
    let mut rank = 0;
    for k in 0..d {
        let lam = eig.values[k];
        if lam > tol && lam > 0.0 {
            rank += 1;
            let proj: f64 = (0..d).map(|a| eig.vectors[(a, k)] * xty[a]).sum();
            for a in 0..d {
                coefficients[a] += eig.vectors[(a, k)] * proj / lam;
            }
        }
    }
    let intercept = y_mean - x_mean.iter().zip(&coefficients).map(|(a, b)| a * b).sum::<f64>();
    let mut fit = Regression {
        coefficients,
        intercept,
        r_squared: 0.0,
        fitted: Vec::with_capacity(s),
        residuals: Vec::with_capacity(s),
        rank_deficient: rank < d,
        constant_target: false,
    };
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for r in 0..s {
        let yhat = fit.predict(features.row(r));
        let e = targets[r] - yhat;
        fit.fitted.push(yhat);
        fit.residuals.push(e);
        ss_res += e * e;
        ss_tot += (targets[r] - y_mean) * (targets[r] - y_mean);
    }
    if ss_tot == 0.0 {
        fit.constant_target = true;
    } else {
        fit.r_squared = 1.0 - ss_res / ss_tot;
    }
    Ok(fit)
}
