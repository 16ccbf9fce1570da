//! Rectified Adam.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::{powi, sqrt};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for RadamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One RAdam update at step `t ≥ 1`. Entries with a `false` mask keep their
/// value and moments.
///
/// While the variance rectification length `ρ_t` is at most 4 the step is a
/// bias-corrected momentum step; afterwards the adaptive step is scaled by the
/// rectification factor.
pub fn radam_update(
    params: &mut [f64],
    grads: &[f64],
    mask: Option<&[bool]>,
    moments: &mut Moments,
    t: u64,
    lr: f64,
    cfg: &RadamConfig,
) {
    debug_assert_eq!(params.len(), grads.len());
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let ti = t.min(i32::MAX as u64) as i32;
    let b1t = powi(b1, ti);
    let b2t = powi(b2, ti);
    let rho_inf = 2.0 / (1.0 - b2) - 1.0;
    let rho_t = rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t);
    let rect = if rho_t > 4.0 {
        Some(sqrt(
            (rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t),
        ))
    } else {
        None
    };
    let bc2 = sqrt(1.0 - b2t);
    for i in 0..params.len() {
        if mask.is_some_and(|mk| !mk[i]) {
            continue;
        }
        let g = grads[i];
        let m = &mut moments.m[i];
        let v = &mut moments.v[i];
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / (1.0 - b1t);
        params[i] -= match rect {
            Some(r) => lr * m_hat * r * bc2 / (sqrt(*v) + cfg.eps),
            None => lr * m_hat,
        };
    }
}
