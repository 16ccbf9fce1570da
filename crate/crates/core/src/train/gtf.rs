//! Generalized-teacher-forcing forward pass, Gaussian loss and hand-written
//! backpropagation through time.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{BatchItem, NoiseScale};
use crate::dynsys::Cohort;
use crate::linalg::Mat;
use crate::math::ln;
use crate::model::{
    materialize, materialize_backward, shplrnn_step_into, vanilla_rnn_step_into, FlowParams, GroupParams,
    Observation, SubjectFeature, SubjectGrad, SubjectModel,
};
use crate::{Error, Result};

/// Borrowed parameters of a hierarchical model.
#[derive(Debug, Clone, Copy)]
pub struct ModelView<'a> {
    pub group: &'a GroupParams,
    pub features: &'a [SubjectFeature],
    pub noise: &'a [NoiseScale],
}

/// `(1 − α)·z_model + α·z_data`, with both endpoints returned exactly.
pub fn gtf_interpolate(z_model: &[f64], z_data: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = vec![0.0; z_model.len()];
    interpolate_into(z_model, z_data, alpha, &mut out);
    out
}

fn interpolate_into(z_model: &[f64], z_data: &[f64], alpha: f64, out: &mut [f64]) {
    if alpha == 0.0 {
        out.copy_from_slice(z_model);
    } else if alpha == 1.0 {
        out.copy_from_slice(z_data);
    } else {
        for ((o, m), d) in out.iter_mut().zip(z_model).zip(z_data) {
            *o = (1.0 - alpha) * m + alpha * d;
        }
    }
}

/// Gaussian negative log-likelihood `Σ_t ½ Σ_i (ln σ_i + e_ti²/σ_i)` over
/// row-major predictions and observations with `sigma.len()` columns.
pub fn nll_loss(predictions: &[f64], observations: &[f64], sigma: &[f64]) -> f64 {
    let n = sigma.len();
    let log_det: f64 = sigma.iter().map(|&s| ln(s)).sum();
    let rows = predictions.len() / n;
    let mut total = 0.0;
    for t in 0..rows {
        let mut quad = 0.0;
        for i in 0..n {
            let e = observations[t * n + i] - predictions[t * n + i];
            quad += e * e / sigma[i];
        }
        total += 0.5 * (log_det + quad);
    }
    total
}

/// Activations of one batch element.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceCache {
    pub item: BatchItem,
    /// Interpolated inputs `z̃_1 … z̃_{T−1}`, row-major `(T−1) × M`.
    pub inputs: Vec<f64>,
    /// ReLU outputs per step, `(T−1) × L` (empty for the vanilla backbone).
    pub hidden: Vec<f64>,
    /// Model states `z_2 … z_T`, `(T−1) × M`.
    pub states: Vec<f64>,
    /// Predictions `x̂_2 … x̂_T`, `(T−1) × N`.
    pub predictions: Vec<f64>,
}

/// Result of [`forward_gtf`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub alpha: f64,
    pub seq_len: usize,
    pub items: Vec<SequenceCache>,
    /// Materialized models of the subjects present in the batch.
    pub models: Vec<Option<SubjectModel>>,
}

impl ForwardPass {
    pub fn n_scored(&self) -> usize {
        self.items.len() * (self.seq_len - 1)
    }
}

/// Gradients of the training objective
/// `Σ nll / n_scored + l2·‖group‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub objective: f64,
    /// Unnormalized negative log-likelihood of the batch.
    pub nll: f64,
    pub n_scored: usize,
    pub group: Vec<f64>,
    /// Subject-major, `S × N_feat`.
    pub features: Vec<f64>,
    /// Subject-major, `S × N`.
    pub log_sigma: Vec<f64>,
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.objective.is_finite()
            && self
                .group
                .iter()
                .chain(&self.features)
                .chain(&self.log_sigma)
                .all(|v| v.is_finite())
    }
}

fn teacher_maps(models: &[Option<SubjectModel>]) -> Vec<Option<Mat>> {
    models
        .iter()
        .map(|m| match m {
            Some(SubjectModel {
                obs: Observation::Linear(b),
                ..
            }) => Some(b.pseudo_inverse()),
            _ => None,
        })
        .collect()
}

fn teacher_into(map: Option<&Mat>, x: &[f64], out: &mut [f64]) {
    match map {
        None => out.copy_from_slice(x),
        Some(p) => p.mul_vec_into(x, out),
    }
}

fn check_batch(view: ModelView<'_>, cohort: &Cohort, batch: &[BatchItem], seq_len: usize) -> Result<()> {
    let s = cohort.len();
    if view.features.len() != s || view.noise.len() != s {
        return Err(Error::Shape(format!(
            "{} features and {} noise scales for {s} subjects",
            view.features.len(),
            view.noise.len()
        )));
    }
    if seq_len < 2 {
        return Err(Error::InvalidArgument("sequence length must be at least 2".into()));
    }
    if cohort.dim() != view.group.spec().n_obs {
        return Err(Error::Shape("cohort dimension differs from the model".into()));
    }
    for item in batch {
        let Some(traj) = cohort.subjects.get(item.subject) else {
            return Err(Error::Shape(format!("batch references subject {}", item.subject)));
        };
        if item.start + seq_len > traj.len() {
            return Err(Error::SequenceTooLong {
                subject: item.subject,
                t_seq: item.start + seq_len,
                t_max: traj.len(),
            });
        }
    }
    Ok(())
}

/// Runs every batch element through the GTF recursion.
///
/// `z̃_1` is the data-inferred state; for `t ≥ 2`, `z_t = F(z̃_{t−1})`,
/// `x̂_t = h(z_t)` and `z̃_t = (1 − α)·z_t + α·z̄_t`.
pub fn forward_gtf(
    view: ModelView<'_>,
    cohort: &Cohort,
    batch: &[BatchItem],
    alpha: f64,
    seq_len: usize,
) -> Result<ForwardPass> {
    forward_impl(view, cohort, batch, alpha, seq_len, None)
}

pub(crate) fn forward_impl(
    view: ModelView<'_>,
    cohort: &Cohort,
    batch: &[BatchItem],
    alpha: f64,
    seq_len: usize,
    teachers: Option<&[Option<Mat>]>,
) -> Result<ForwardPass> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    check_batch(view, cohort, batch, seq_len)?;
    let mut models: Vec<Option<SubjectModel>> = vec![None; cohort.len()];
    for item in batch {
        if models[item.subject].is_none() {
            models[item.subject] = Some(materialize(view.group, &view.features[item.subject])?);
        }
    }
    let own_teachers;
    let teachers = match teachers {
        Some(t) => t,
        None => {
            own_teachers = teacher_maps(&models);
            &own_teachers
        }
    };
    let spec = view.group.spec();
    let (m, n) = (spec.latent, spec.n_obs);
    let steps = seq_len - 1;
    let mut items = Vec::with_capacity(batch.len());
    let mut zbar = vec![0.0; m];
    for (k, item) in batch.iter().enumerate() {
        let model = models[item.subject].as_ref().expect("materialized above");
        let teacher = teachers[item.subject].as_ref();
        let data = cohort.subjects[item.subject].data();
        let l = match &model.flow {
            FlowParams::ShPlrnn(p) => p.hidden(),
            FlowParams::Vanilla(_) => 0,
        };
        let mut inputs = vec![0.0; steps * m];
        let mut hidden = vec![0.0; steps * l];
        let mut states = vec![0.0; steps * m];
        let mut predictions = vec![0.0; steps * n];
        teacher_into(teacher, data.row(item.start), &mut inputs[..m]);
        for t in 0..steps {
            let (done, rest) = inputs.split_at_mut((t + 1) * m);
            let zin = &done[t * m..];
            let zout = &mut states[t * m..(t + 1) * m];
            match &model.flow {
                FlowParams::ShPlrnn(p) => shplrnn_step_into(p, zin, &mut hidden[t * l..(t + 1) * l], zout),
                FlowParams::Vanilla(p) => vanilla_rnn_step_into(p, zin, zout),
            }
            let pred = &mut predictions[t * n..(t + 1) * n];
            match &model.obs {
                Observation::Identity => pred.copy_from_slice(zout),
                Observation::Linear(b) => b.mul_vec_into(zout, pred),
            }
            if !pred.iter().all(|v| v.is_finite()) {
                return Err(Error::TrainingDiverged { element: k, retries: 0 });
            }
            if t + 1 < steps {
                teacher_into(teacher, data.row(item.start + t + 1), &mut zbar);
                interpolate_into(zout, &zbar, alpha, &mut rest[..m]);
            }
        }
        items.push(SequenceCache {
            item: *item,
            inputs,
            hidden,
            states,
            predictions,
        });
    }
    Ok(ForwardPass {
        alpha,
        seq_len,
        items,
        models,
    })
}

/// Exact gradients of the normalized objective for a cached forward pass.
/// Data-inferred states are treated as constants.
pub fn backward(view: ModelView<'_>, cohort: &Cohort, pass: &ForwardPass, l2_group: f64) -> Result<Gradients> {
    let batch: Vec<BatchItem> = pass.items.iter().map(|c| c.item).collect();
    check_batch(view, cohort, &batch, pass.seq_len)?;
    let spec = *view.group.spec();
    let (m, n, nf) = (spec.latent, spec.n_obs, spec.n_feat);
    let s = cohort.len();
    let steps = pass.seq_len - 1;
    let n_scored = pass.n_scored();
    let scale = 1.0 / n_scored as f64;
    let alpha = pass.alpha;

    let mut subject_grads: Vec<Option<SubjectGrad>> = pass
        .models
        .iter()
        .map(|m| m.as_ref().map(SubjectGrad::zeros_like))
        .collect();
    if subject_grads.len() != s {
        return Err(Error::Shape("forward pass was computed for another cohort".into()));
    }
    let mut d_log_sigma = vec![0.0; s * n];
    let mut nll = 0.0;

    let mut carry = vec![0.0; m];
    let mut dz = vec![0.0; m];
    let mut dpred = vec![0.0; n];
    let mut dr: Vec<f64> = Vec::new();
    for cache in &pass.items {
        let j = cache.item.subject;
        let Some(model) = pass.models[j].as_ref() else {
            return Err(Error::Shape(format!("no model cached for subject {j}")));
        };
        let grad = subject_grads[j].as_mut().expect("allocated with the model");
        let sigma = view.noise[j].sigma();
        if sigma.len() != n {
            return Err(Error::Shape(format!("noise scale of subject {j} has wrong length")));
        }
        let data = cohort.subjects[j].data();
        let rows = &data.as_slice()[(cache.item.start + 1) * n..(cache.item.start + pass.seq_len) * n];
        nll += nll_loss(&cache.predictions, rows, &sigma);
        let dls = &mut d_log_sigma[j * n..(j + 1) * n];
        carry.iter_mut().for_each(|c| *c = 0.0);
        for t in (0..steps).rev() {
            let zin = &cache.inputs[t * m..(t + 1) * m];
            let zout = &cache.states[t * m..(t + 1) * m];
            for i in 0..n {
                let e = rows[t * n + i] - cache.predictions[t * n + i];
                dpred[i] = -e / sigma[i] * scale;
                dls[i] += scale * 0.5 * (1.0 - e * e / sigma[i]);
            }
            match (&model.obs, grad.obs.as_mut()) {
                (Observation::Linear(b), Some(db)) => {
                    dz.iter_mut().for_each(|v| *v = 0.0);
                    b.tr_mul_vec_acc(&dpred, &mut dz);
                    db.add_outer(&dpred, zout, 1.0);
                }
                _ => dz.copy_from_slice(&dpred),
            }
            if t + 1 < steps && alpha != 1.0 {
                for (d, c) in dz.iter_mut().zip(&carry) {
                    *d += (1.0 - alpha) * c;
                }
            }
            let need_carry = t > 0;
            match (&model.flow, &mut grad.flow) {
                (FlowParams::ShPlrnn(p), FlowParams::ShPlrnn(g)) => {
                    let l = p.hidden();
                    let r = &cache.hidden[t * l..(t + 1) * l];
                    for i in 0..m {
                        g.a[i] += dz[i] * zin[i];
                        g.h1[i] += dz[i];
                    }
                    g.w1.add_outer(&dz, r, 1.0);
                    dr.clear();
                    dr.resize(l, 0.0);
                    p.w1.tr_mul_vec_acc(&dz, &mut dr);
                    for (d, &rv) in dr.iter_mut().zip(r) {
                        if rv <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    for (h, d) in g.h2.iter_mut().zip(&dr) {
                        *h += d;
                    }
                    g.w2.add_outer(&dr, zin, 1.0);
                    if need_carry {
                        for i in 0..m {
                            carry[i] = p.a[i] * dz[i];
                        }
                        p.w2.tr_mul_vec_acc(&dr, &mut carry);
                    }
                }
                (FlowParams::Vanilla(p), FlowParams::Vanilla(g)) => {
                    for (d, z) in dz.iter_mut().zip(zout) {
                        *d *= 1.0 - z * z;
                    }
                    for (b, d) in g.b.iter_mut().zip(&dz) {
                        *b += d;
                    }
                    g.w.add_outer(&dz, zin, 1.0);
                    if need_carry {
                        carry.iter_mut().for_each(|c| *c = 0.0);
                        p.w.tr_mul_vec_acc(&dz, &mut carry);
                    }
                }
                _ => unreachable!("gradient mirrors the model"),
            }
        }
    }

    let mut d_group = vec![0.0; view.group.len()];
    let mut d_features = vec![0.0; s * nf];
    for (j, g) in subject_grads.iter().enumerate() {
        if let Some(g) = g {
            materialize_backward(view.group, &view.features[j], g, &mut d_group, &mut d_features[j * nf..(j + 1) * nf]);
        }
    }
    let sq = view.group.sum_of_squares();
    for (d, v) in d_group.iter_mut().zip(view.group.values()) {
        *d += 2.0 * l2_group * v;
    }
    Ok(Gradients {
        objective: nll * scale + l2_group * sq,
        nll,
        n_scored,
        group: d_group,
        features: d_features,
        log_sigma: d_log_sigma,
    })
}

/// Normalized objective of a batch without gradients.
pub fn objective(
    view: ModelView<'_>,
    cohort: &Cohort,
    batch: &[BatchItem],
    alpha: f64,
    seq_len: usize,
    l2_group: f64,
) -> Result<f64> {
    let pass = forward_gtf(view, cohort, batch, alpha, seq_len)?;
    Ok(pass_objective(view, cohort, &pass, l2_group))
}

pub(crate) fn pass_objective(view: ModelView<'_>, cohort: &Cohort, pass: &ForwardPass, l2_group: f64) -> f64 {
    let n = view.group.spec().n_obs;
    let mut nll = 0.0;
    for cache in &pass.items {
        let j = cache.item.subject;
        let data = cohort.subjects[j].data().as_slice();
        let rows = &data[(cache.item.start + 1) * n..(cache.item.start + pass.seq_len) * n];
        nll += nll_loss(&cache.predictions, rows, &view.noise[j].sigma());
    }
    nll / pass.n_scored() as f64 + l2_group * view.group.sum_of_squares()
}
