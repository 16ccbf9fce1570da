//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails. `HDSR_ACCEPTANCE=1,3,10` restricts the
//! run to the listed criteria.

use std::collections::BTreeMap;
use std::time::Instant;

use anyhow::{Context, Result};
use hdsr::checkpoint::Checkpoint;
use hdsr::config::{CohortSection, FinetuneSection, Standardize};
use hdsr::pipeline::{evaluate_run, finetune, load_cohort, prepare, standardize_new, train_ensemble_members, train_hierarchical};
use hdsr_core::analysis::{
    cluster_accuracy, count_local_minima, feature_matrix, feature_robustness, gmm_assign, gmm_fit, loss_landscape_scan, pca,
    pearson, regress_features,
};
use hdsr_core::dynsys::{generate_cohort, presets, Cohort, Trajectory};
use hdsr_core::eval::{hellinger_distance, hellinger_from_spectra, histogram, state_space_divergence, EvalConfig, Grid, SPECTRUM_SMOOTHING};
use hdsr_core::model::{generate_trajectory, materialize, SubjectFeature};
use hdsr_core::rng::Rng;
use hdsr_core::train::{backward, forward_gtf, init, objective, BatchItem, SigmaPolicy, TrainConfig, TrainState};
use hdsr_core::Mat;
use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;

type Verdict = (bool, String);

fn normal(rng: &mut Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

fn random_cohort(s: usize, n: usize, t: usize, rng: &mut Rng) -> Cohort {
    let subjects = (0..s)
        .map(|_| {
            let rows: Vec<Vec<f64>> = (0..t).map(|_| (0..n).map(|_| normal(rng)).collect()).collect();
            Trajectory::from_rows(&rows, 0.01).unwrap()
        })
        .collect();
    Cohort::new(subjects).unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        n_feat: 2,
        hidden: Some(8),
        seq_len: 20,
        ..TrainConfig::default()
    }
}

/// Random parameters with bounded but nontrivial dynamics.
fn random_state(config: &TrainConfig, cohort: &Cohort, rng: &mut Rng) -> TrainState {
    let mut state = init(config, cohort).unwrap();
    for v in state.group.values_mut() {
        *v = 0.25 * normal(rng);
    }
    let scale = 1.0 / (config.n_feat as f64).sqrt();
    for f in &mut state.features {
        f.0.iter_mut().for_each(|v| *v = scale * normal(rng));
    }
    for s in &mut state.noise {
        s.log_sigma.iter_mut().for_each(|v| *v = 0.3 * normal(rng));
    }
    state
}

fn random_batch(cohort: &Cohort, seq_len: usize, rng: &mut Rng) -> Vec<BatchItem> {
    (0..cohort.len())
        .map(|j| BatchItem {
            subject: j,
            start: rng.random_range(0..=cohort.subjects[j].len() - seq_len),
        })
        .collect()
}

/// ReLU activation pattern of every forward step.
fn activation_pattern(state: &TrainState, cohort: &Cohort, batch: &[BatchItem], alpha: f64, seq_len: usize) -> Vec<bool> {
    let pass = forward_gtf(state.view(), cohort, batch, alpha, seq_len).unwrap();
    pass.items.iter().flat_map(|c| c.hidden.iter().map(|&h| h > 0.0)).collect()
}

/// Central differences are a valid oracle only where the objective is smooth
/// across the whole stencil and its magnitude keeps round-off far below the
/// tolerance. Draws violating either are replaced by fresh draws.
fn criterion_1() -> Result<Verdict> {
    let t0 = Instant::now();
    let config = small_config();
    let (eps, l2) = (1e-5, 1e-3);
    let alphas = [0.0, 0.3, 1.0];
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let (mut accepted, mut rejected) = (0, 0);
    let mut draw = 0u64;
    while accepted < 20 && draw < 200 {
        let mut rng = Rng::seed_from_u64(1000 + draw);
        draw += 1;
        let cohort = random_cohort(3, 3, 40, &mut rng);
        let state = random_state(&config, &cohort, &mut rng);
        let batch = random_batch(&cohort, config.seq_len, &mut rng);
        let f = |s: &TrainState, alpha: f64| objective(s.view(), &cohort, &batch, alpha, config.seq_len, l2).unwrap();
        let mut perturbed: Vec<(TrainState, TrainState)> = Vec::new();
        let mask = state.group.trainable_mask();
        let grads: Vec<_> = alphas
            .iter()
            .map(|&a| backward(state.view(), &cohort, &forward_gtf(state.view(), &cohort, &batch, a, config.seq_len).unwrap(), l2))
            .collect::<hdsr_core::Result<_>>()?;
        let mut coords: Vec<Box<dyn Fn(&hdsr_core::train::Gradients) -> f64>> = Vec::new();
        for i in (0..state.group.len()).filter(|&i| mask[i]) {
            let (mut p, mut m) = (state.clone(), state.clone());
            p.group.values_mut()[i] += eps;
            m.group.values_mut()[i] -= eps;
            perturbed.push((p, m));
            coords.push(Box::new(move |g| g.group[i]));
        }
        let (nf, n) = (config.n_feat, cohort.dim());
        for j in 0..cohort.len() {
            for k in 0..nf {
                let (mut p, mut m) = (state.clone(), state.clone());
                p.features[j].0[k] += eps;
                m.features[j].0[k] -= eps;
                perturbed.push((p, m));
                coords.push(Box::new(move |g| g.features[j * nf + k]));
            }
            for i in 0..n {
                let (mut p, mut m) = (state.clone(), state.clone());
                p.noise[j].log_sigma[i] += eps;
                m.noise[j].log_sigma[i] -= eps;
                perturbed.push((p, m));
                coords.push(Box::new(move |g| g.log_sigma[j * n + i]));
            }
        }
        let valid = alphas.iter().all(|&a| {
            let base = activation_pattern(&state, &cohort, &batch, a, config.seq_len);
            f(&state, a).abs() <= 1e3
                && perturbed.iter().all(|(p, m)| {
                    activation_pattern(p, &cohort, &batch, a, config.seq_len) == base
                        && activation_pattern(m, &cohort, &batch, a, config.seq_len) == base
                })
        });
        if !valid {
            rejected += 1;
            continue;
        }
        accepted += 1;
        for (ai, &a) in alphas.iter().enumerate() {
            for ((p, m), coord) in perturbed.iter().zip(&coords) {
                let analytic = coord(&grads[ai]);
                let numeric = (f(p, a) - f(m, a)) / (2.0 * eps);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Ok((
        accepted == 20 && worst <= 1e-4 && secs < 60.0,
        format!(
            "{checked} coordinates over {accepted} instances x 3 alphas ({rejected} draws replaced: kink inside the stencil or objective above 1e3), \
             max relative error {worst:.2e} (<= 1e-4), {secs:.1}s (< 60s)"
        ),
    ))
}

fn criterion_2() -> Result<Verdict> {
    let config = small_config();
    let mut mismatches = 0;
    let mut instances = 0;
    for instance in 0..20u64 {
        let mut rng = Rng::seed_from_u64(2000 + instance);
        let cohort = random_cohort(3, 3, 40, &mut rng);
        let state = random_state(&config, &cohort, &mut rng);
        let batch = random_batch(&cohort, config.seq_len, &mut rng);
        let forced = forward_gtf(state.view(), &cohort, &batch, 1.0, config.seq_len)?;
        let free = forward_gtf(state.view(), &cohort, &batch, 0.0, config.seq_len)?;
        for (k, item) in batch.iter().enumerate() {
            let model = materialize(&state.group, &state.features[item.subject])?;
            let data = &cohort.subjects[item.subject];
            for t in 0..config.seq_len - 1 {
                let one_step = model.flow.step(data.row(item.start + t));
                if forced.items[k].predictions[t * 3..(t + 1) * 3] != one_step[..] {
                    mismatches += 1;
                }
            }
            let rollout = generate_trajectory(&model, data.row(item.start), config.seq_len - 1)?;
            let a: Vec<u64> = free.items[k].predictions.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = rollout.data().as_slice().iter().map(|v| v.to_bits()).collect();
            if a != b {
                mismatches += 1;
            }
            instances += 1;
        }
    }
    Ok((
        mismatches == 0,
        format!("{instances} sequences: alpha=1 vs one-step predictions and alpha=0 vs free rollout, {mismatches} mismatches"),
    ))
}

fn traj(rows: &[&[f64]]) -> Trajectory {
    Trajectory::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), 1.0).unwrap()
}

/// Occupancy counts by brute force over every cell of a box built here.
fn exhaustive_counts(generated: &Trajectory, reference: &Trajectory, m: usize) -> BTreeMap<Vec<usize>, u64> {
    let n = reference.dim();
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    for t in 0..reference.len() {
        for i in 0..n {
            lo[i] = lo[i].min(reference.row(t)[i]);
            hi[i] = hi[i].max(reference.row(t)[i]);
        }
    }
    for i in 0..n {
        let pad = 0.05 * (hi[i] - lo[i]);
        lo[i] -= pad;
        hi[i] += pad;
    }
    let cell = |x: f64, i: usize| -> usize {
        let w = (hi[i] - lo[i]) / m as f64;
        (1..m).filter(|&k| x >= lo[i] + k as f64 * w).max().unwrap_or(0)
    };
    let mut out = BTreeMap::new();
    let total = m.pow(n as u32);
    for flat in 0..total {
        let idx: Vec<usize> = (0..n).map(|i| flat / m.pow((n - 1 - i) as u32) % m).collect();
        let count = (0..generated.len())
            .filter(|&t| (0..n).all(|i| cell(generated.row(t)[i], i) == idx[i]))
            .count() as u64;
        if count > 0 {
            out.insert(idx, count);
        }
    }
    out
}

fn criterion_3() -> Result<Verdict> {
    let kl_expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
    let d = state_space_divergence(&traj(&[&[0.0], &[1.0], &[0.0], &[1.0]]), &traj(&[&[0.0], &[1.0], &[1.0], &[1.0]]), 2)?;
    let h_expected = (1.0 - 0.5f64.sqrt()).sqrt();
    let h = hellinger_from_spectra(&[1.0, 0.0], &[0.5, 0.5])?;
    let two_bin_ok = (d - kl_expected).abs() <= 1e-6
        && (h - h_expected).abs() <= 1e-6
        && (kl_expected - 0.1438).abs() < 5e-5
        && (h_expected - 0.5412).abs() < 5e-5;

    let mut rng = Rng::seed_from_u64(3);
    let mut nonzero = 0;
    for k in 0..50 {
        let n = 1 + k % 4;
        let rows: Vec<Vec<f64>> = (0..300 + k).map(|_| (0..n).map(|_| normal(&mut rng)).collect()).collect();
        let x = Trajectory::from_rows(&rows, 1.0)?;
        let m = if n <= 3 { 30 } else { 5 };
        if state_space_divergence(&x, &x, m)? != 0.0 || hellinger_distance(&x, &x, SPECTRUM_SMOOTHING)? != 0.0 {
            nonzero += 1;
        }
    }

    let mut hist_mismatch = 0;
    for k in 0..12 {
        let n = 1 + k % 3;
        let m = [3, 4, 5][k % 3];
        let mk = |t: usize, rng: &mut Rng| {
            let rows: Vec<Vec<f64>> = (0..t).map(|_| (0..n).map(|_| normal(rng)).collect()).collect();
            Trajectory::from_rows(&rows, 1.0).unwrap()
        };
        let reference = mk(200, &mut rng);
        let generated = mk(150, &mut rng);
        let got = histogram(&generated, &Grid::around(&reference, m));
        let want = exhaustive_counts(&generated, &reference, m);
        let want: Vec<(u64, u64)> = want
            .into_iter()
            .map(|(idx, c)| (idx.iter().fold(0u64, |acc, &i| acc * m as u64 + i as u64), c))
            .collect();
        if got != want {
            hist_mismatch += 1;
        }
    }
    Ok((
        two_bin_ok && nonzero == 0 && hist_mismatch == 0,
        format!(
            "two-bin D_stsp {d:.6} (expected {kl_expected:.6}), D_H {h:.6} (expected {h_expected:.6}); \
             self-distance nonzero on {nonzero}/50; histogram mismatches {hist_mismatch}/12"
        ),
    ))
}

/// Training setup for the interpretability cohort.
fn interpretability_config(seed: u64) -> TrainConfig {
    TrainConfig {
        n_feat: 1,
        hidden: Some(50),
        lr_group: 1e-3,
        lr_features: 1e-3,
        lr_decay: 0.01,
        feature_init_mean: 1.0,
        epochs: 1000,
        seed,
        ..TrainConfig::default()
    }
}

fn rho10_cohort(seed: u64, t_max: Option<usize>) -> Result<hdsr::pipeline::Prepared> {
    let section = CohortSection {
        preset: Some("lorenz63-rho10".into()),
        t_max,
        ..CohortSection::default()
    };
    prepare(&load_cohort(&section, seed)?, Standardize::Global)
}

struct Trained {
    checkpoints: Vec<Checkpoint>,
    r_squared: Vec<f64>,
    seconds: Vec<f64>,
}

fn train_interpretability_runs() -> Result<Trained> {
    let mut out = Trained {
        checkpoints: Vec::new(),
        r_squared: Vec::new(),
        seconds: Vec::new(),
    };
    for seed in 0..3 {
        let p = rho10_cohort(seed, None)?;
        let t0 = Instant::now();
        let (ck, _) = train_hierarchical(&p, &interpretability_config(seed), None, |_, _| {})?;
        out.seconds.push(t0.elapsed().as_secs_f64());
        let rho: Vec<f64> = ck.gt_params.as_ref().context("gt_params")?.iter().map(|g| g[0]).collect();
        let x = Mat::from_rows(&ck.features)?;
        out.r_squared.push(regress_features(&x, &rho)?.r_squared);
        out.checkpoints.push(ck);
    }
    Ok(out)
}

fn criterion_4(t: &Trained) -> Result<Verdict> {
    let passes = t.r_squared.iter().filter(|&&r| r >= 0.90).count();
    let slowest = t.seconds.iter().copied().fold(0.0, f64::max);
    Ok((
        passes >= 2 && slowest <= 3600.0,
        format!("R^2 per seed {:.3?} (>= 0.90 in {passes}/3, need 2), slowest run {slowest:.0}s (<= 3600s)", t.r_squared),
    ))
}

fn criterion_5(t: &Trained) -> Result<Verdict> {
    let cfg = EvalConfig::default();
    let mut rows = Vec::new();
    for ck in &t.checkpoints {
        let (_, m) = evaluate_run(std::slice::from_ref(ck), &cfg, None)?;
        rows.push((m.median_d_stsp, m.median_d_h, m.n_diverged));
    }
    let (ds, dh, _) = rows[0];
    let detail = rows
        .iter()
        .enumerate()
        .map(|(s, (a, b, d))| format!("seed {s}: D_stsp {a:.3} D_H {b:.3} diverged {d}"))
        .collect::<Vec<_>>()
        .join("; ");
    Ok((
        ds <= 1.0 && dh <= 0.25,
        format!("seed-0 run median D_stsp {ds:.3} (<= 1.0), median D_H {dh:.3} (<= 0.25) [{detail}]"),
    ))
}

fn criterion_6() -> Result<Verdict> {
    let cfg = EvalConfig::default();
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 0..3 {
        let p = rho10_cohort(seed, Some(200))?;
        let config = TrainConfig {
            n_feat: 3,
            epochs: 500,
            ..interpretability_config(seed)
        };
        let (hier, _) = train_hierarchical(&p, &config, None, |_, _| {})?;
        let (_, mh) = evaluate_run(&[hier], &cfg, None)?;
        let members: Vec<Checkpoint> = train_ensemble_members(&p, &config, None, |_, _, _| {})?.into_iter().map(|(c, _)| c).collect();
        let (_, me) = evaluate_run(&members, &cfg, None)?;
        if mh.median_d_stsp < me.median_d_stsp {
            wins += 1;
        }
        detail.push(format!("seed {seed}: {:.3} vs {:.3}", mh.median_d_stsp, me.median_d_stsp));
    }
    Ok((wins >= 2, format!("hierarchical < ensemble median D_stsp in {wins}/3 pairs (need 2) [{}]", detail.join("; "))))
}

fn criterion_7(t: &Trained) -> Result<Verdict> {
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("checkpoint.json");
    t.checkpoints[0].save(&path)?;
    let ck = Checkpoint::load(&path)?;
    let section = FinetuneSection::default();
    let group = ck.group_params()?;
    let (lo, hi) = ck.features.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, f| (a.0.min(f[0]), a.1.max(f[0])));
    let width = hi - lo;
    let grid = presets::linspace(lo - width, hi + width, 201);
    let mut within = 0;
    let mut slowest: f64 = 0.0;
    let mut minima = Vec::new();
    let mut errors = Vec::new();
    for (k, &rho) in presets::linspace(31.0, 77.0, 10).iter().enumerate() {
        let spec = presets::lorenz63_rho(&[rho], 7000 + k as u64).with_t_max(100);
        let raw = generate_cohort(&spec)?.subjects.remove(0);
        let report = finetune(&ck, &raw, &section, 0)?;
        let pred = report.predicted.context("prediction")?;
        let err = (pred - rho).abs() / rho;
        if err <= 0.15 {
            within += 1;
        }
        errors.push(err);
        slowest = slowest.max(report.seconds);
        let seq = standardize_new(&ck, &raw)?;
        let scan = loss_landscape_scan(&group, &seq, &grid, &SigmaPolicy::Profiled, &section.optimizer)?;
        minima.push(count_local_minima(&scan));
    }
    Ok((
        within >= 8 && slowest <= 30.0 && minima.iter().all(|&m| m == 1),
        format!(
            "within 15% for {within}/10 held-out rho (need 8), relative errors {:.3?}; slowest fit {slowest:.2}s (<= 30s); local minima per landscape {minima:?}",
            errors
        ),
    ))
}

/// Scalar features make every cosine similarity ±1, so the cosine structure
/// of same-sign features is constant and correlates trivially. For
/// `N_feat = 1` the features themselves are correlated instead, up to the
/// global sign flip cosine similarity is also blind to.
fn criterion_8(t: &Trained) -> Result<Verdict> {
    let mats = t
        .checkpoints
        .iter()
        .map(|c| feature_matrix(&c.features.iter().cloned().map(SubjectFeature).collect::<Vec<_>>()))
        .collect::<hdsr_core::Result<Vec<_>>>()?;
    let cosine = feature_robustness(&mats)?;
    let mut pairs = Vec::new();
    for a in 0..mats.len() {
        for b in a + 1..mats.len() {
            pairs.push(pearson(&mats[a].column(0), &mats[b].column(0)).abs());
        }
    }
    let raw = pairs.iter().sum::<f64>() / pairs.len() as f64;
    Ok((
        raw >= 0.7,
        format!(
            "mean pairwise |correlation| of scalar features {raw:.3} (>= 0.7), pairs {pairs:.3?}; cosine-structure correlation {:.3} (degenerate for N_feat = 1)",
            cosine.mean
        ),
    ))
}

fn criterion_9() -> Result<Verdict> {
    let section = CohortSection {
        preset: Some("lorenz63-regimes".into()),
        ..CohortSection::default()
    };
    let p = prepare(&load_cohort(&section, 0)?, Standardize::Global)?;
    let (ck, _) = train_hierarchical(&p, &interpretability_config(0), None, |_, _| {})?;
    let x = Mat::from_rows(&ck.features)?;
    let fit = gmm_fit(&x, 2, 10, 0)?;
    let acc = cluster_accuracy(&gmm_assign(&fit.model, &x), ck.labels.as_ref().context("labels")?)?;
    Ok((acc >= 0.9, format!("GMM K=2 best-permutation accuracy {acc:.2} (>= 0.9)")))
}

fn criterion_10() -> Result<Verdict> {
    let mut rng = Rng::seed_from_u64(10);
    let random_mat = |r: usize, c: usize, rng: &mut Rng| {
        let rows: Vec<Vec<f64>> = (0..r).map(|_| (0..c).map(|_| normal(rng)).collect()).collect();
        Mat::from_rows(&rows).unwrap()
    };
    let mut pca_err: f64 = 0.0;
    for k in 0..20 {
        let x = random_mat(30 + k, 1 + k % 6, &mut rng);
        let back = pca(&x)?.reconstruct();
        for (a, b) in x.as_slice().iter().zip(back.as_slice()) {
            pca_err = pca_err.max((a - b).abs());
        }
    }
    let mut em_violations = 0;
    for k in 0..100u64 {
        let x = random_mat(40 + (k as usize % 20), 1 + (k as usize % 3), &mut rng);
        let fit = gmm_fit(&x, 1 + (k as usize % 3), 1, k)?;
        for i in 1..fit.history.len() {
            let reinit = fit.reinit_at.iter().any(|&r| r == i || r + 1 == i);
            if !reinit && fit.history[i] < fit.history[i - 1] - 1e-10 {
                em_violations += 1;
            }
        }
    }
    let mut ortho: f64 = 0.0;
    for k in 0..20 {
        let (rows, cols) = (25 + k, 1 + k % 4);
        let x = random_mat(rows, cols, &mut rng);
        let y: Vec<f64> = (0..rows).map(|_| normal(&mut rng)).collect();
        let reg = regress_features(&x, &y)?;
        ortho = ortho.max(reg.residuals.iter().sum::<f64>().abs());
        for c in 0..cols {
            ortho = ortho.max(x.column(c).iter().zip(&reg.residuals).map(|(a, b)| a * b).sum::<f64>().abs());
        }
    }
    Ok((
        pca_err <= 1e-9 && em_violations == 0 && ortho <= 1e-8,
        format!("PCA reconstruction error {pca_err:.1e} (<= 1e-9); EM decreases {em_violations} over 100 datasets; OLS residual orthogonality {ortho:.1e} (<= 1e-8)"),
    ))
}

fn main() {
    let selected: Option<Vec<u32>> = std::env::var("HDSR_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |n: u32| selected.as_ref().is_none_or(|s| s.contains(&n));
    let mut failed = Vec::new();
    let mut record = |n: u32, r: Result<Verdict>| {
        let (pass, detail) = r.unwrap_or_else(|e| (false, format!("error: {e:#}")));
        println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            failed.push(n);
        }
    };
    if wanted(1) {
        record(1, criterion_1());
    }
    if wanted(2) {
        record(2, criterion_2());
    }
    if wanted(3) {
        record(3, criterion_3());
    }
    if [4, 5, 7, 8].into_iter().any(wanted) {
        match train_interpretability_runs() {
            Ok(t) => {
                for (n, f) in [(4, criterion_4 as fn(&Trained) -> Result<Verdict>), (5, criterion_5), (7, criterion_7), (8, criterion_8)] {
                    if wanted(n) {
                        record(n, f(&t));
                    }
                }
            }
            Err(e) => {
                for n in [4, 5, 7, 8].into_iter().filter(|&n| wanted(n)) {
                    record(n, Err(anyhow::anyhow!("training failed: {e:#}")));
                }
            }
        }
    }
    if wanted(6) {
        record(6, criterion_6());
    }
    if wanted(9) {
        record(9, criterion_9());
    }
    if wanted(10) {
        record(10, criterion_10());
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
