use alloc::vec;
use alloc::vec::Vec;

use crate::dynsys::Trajectory;
use crate::model::{GroupParams, SubjectFeature};
use crate::train::{feature_objective, FineTuneConfig, SigmaPolicy};
use crate::{Error, Result};

/// Fine-tuning loss at every scalar feature value of `grid`, all other
/// parameters frozen.
pub fn loss_landscape_scan(
    group: &GroupParams,
    sequence: &Trajectory,
    grid: &[f64],
    sigma: &SigmaPolicy,
    cfg: &FineTuneConfig,
) -> Result<Vec<f64>> {
    if group.spec().n_feat != 1 {
        return Err(Error::InvalidArgument("landscape scans need a scalar feature".into()));
    }
    grid.iter()
        .map(|&l| {
            feature_objective(group, sequence, &SubjectFeature(vec![l]), sigma, cfg)
                .map(|(f, _)| f)
                .or_else(|e| match e {
                    Error::TrainingDiverged { .. } => Ok(f64::INFINITY),
                    other => Err(other),
                })
        })
        .collect()
}

/// Number of local minima of a sampled curve. Runs of equal values count as
/// one point; endpoints count when lower than their single neighbor.
pub fn count_local_minima(values: &[f64]) -> usize {
    let mut v: Vec<f64> = Vec::with_capacity(values.len());
    for &x in values {
        if v.last() != Some(&x) {
            v.push(x);
        }
    }
    match v.len() {
        0 => 0,
        1 => 1,
        n => (0..n)
            .filter(|&i| (i == 0 || v[i] < v[i - 1]) && (i + 1 == n || v[i] < v[i + 1]))
            .count(),
    }
}
