//! The experiment pipelines behind the command line, usable as a library.

use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use hdsr_core::analysis::{
    cluster_accuracy, count_local_minima, feature_matrix, feature_robustness, gmm_assign, gmm_fit, loss_landscape_scan, pca,
    pearson, regress_features, Regression,
};
use hdsr_core::dynsys::{
    generate_cohort, presets, simulate_subject, standardize, Cohort, CohortSpec, ScalingRecord, StandardizeMode, Trajectory,
};
use hdsr_core::eval::{aggregate, default_bins_per_dim, evaluate_subject, EvalConfig, MetricsReport, Summary};
use hdsr_core::model::SubjectFeature;
use hdsr_core::train::{
    ensemble_member, feature_uncertainty, fine_tune_feature, init, train_from, EpochRecord, FineTuneMethod, SigmaPolicy,
    TrainConfig, TrainState,
};
use hdsr_core::Mat;
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::atomic;
use crate::checkpoint::{self, Checkpoint, Provenance};
use crate::cohort_io::{self, Manifest};
use crate::config::{
    require_exists, AnalyzeSection, CohortSection, ExperimentConfig, FinetuneSection, SigmaChoice, Standardize, Task, TrainMode,
};

/// Result of a command that did not fail outright. Any flag turns the exit
/// status into "partial success".
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outcome {
    pub flags: Vec<String>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.flags.is_empty() {
            0
        } else {
            2
        }
    }

    fn flag(&mut self, msg: String) {
        warn!("{msg}");
        self.flags.push(msg);
    }
}

// ---------------------------------------------------------------- cohorts

/// A cohort together with its on-disk metadata.
#[derive(Debug, Clone)]
pub struct LoadedCohort {
    pub cohort: Cohort,
    pub manifest: Manifest,
    /// Set when the cohort was simulated from a preset in this process.
    pub generated: bool,
}

/// Preset recipe with the section's overrides applied.
pub fn preset_spec(section: &CohortSection, seed: u64) -> Result<CohortSpec> {
    let name = section.preset.as_deref().context("cohort.preset is not set")?;
    let mut spec = presets::by_name(name, section.seed.unwrap_or(seed))
        .with_context(|| format!("unknown preset {name:?}; known presets: {}", presets::NAMES.join(", ")))?;
    if let Some(t) = section.t_max {
        ensure!(t >= 2, "cohort.t_max must be at least 2");
        spec = spec.with_t_max(t);
    }
    if let Some(f) = section.noise_fraction {
        ensure!((0.0..1.0).contains(&f), "cohort.noise_fraction must lie in [0, 1)");
        spec.noise_fraction = f;
    }
    if let Some(t) = section.transient_steps {
        spec.transient_steps = t;
    }
    Ok(spec)
}

pub fn load_cohort(section: &CohortSection, seed: u64) -> Result<LoadedCohort> {
    match (&section.preset, &section.dir) {
        (Some(_), Some(_)) => bail!("set either cohort.preset or cohort.dir, not both"),
        (Some(_), None) => {
            let spec = preset_spec(section, seed)?;
            let cohort = generate_cohort(&spec)?;
            let manifest = Manifest::from_spec(&spec, &cohort);
            Ok(LoadedCohort {
                cohort,
                manifest,
                generated: true,
            })
        }
        (None, Some(dir)) => {
            require_exists(dir, "cohort directory")?;
            let (cohort, manifest) = cohort_io::read_cohort(dir)?;
            Ok(LoadedCohort {
                cohort,
                manifest,
                generated: false,
            })
        }
        (None, None) => bail!("no cohort: set cohort.preset or cohort.dir"),
    }
}

/// `generate`: writes a preset cohort directory.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    ensure!(cfg.cohort.dir.is_none(), "generate builds presets; cohort.dir is an input for the other commands");
    let loaded = load_cohort(&cfg.cohort, cfg.seed())?;
    cohort_io::write_cohort(out, &loaded.cohort, &loaded.manifest)?;
    info!("wrote {} subjects to {}", loaded.cohort.len(), out.display());
    Ok(Outcome::default())
}

// ---------------------------------------------------------------- training

/// Training data after standardization.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub data: Cohort,
    pub scaling: Option<ScalingRecord>,
    pub manifest: Manifest,
}

pub fn prepare(loaded: &LoadedCohort, how: Standardize) -> Result<Prepared> {
    let (data, scaling) = match how.mode() {
        Some(mode) => {
            let (c, r) = standardize(&loaded.cohort, mode)?;
            (c, Some(r))
        }
        None => (loaded.cohort.clone(), None),
    };
    Ok(Prepared {
        data,
        scaling,
        manifest: loaded.manifest.clone(),
    })
}

fn provenance(p: &Prepared, subjects: &[usize]) -> Provenance {
    let sub = p.data.select(subjects);
    Provenance {
        subjects: subjects.to_vec(),
        scaling: p.scaling.clone(),
        gt_params: sub.gt_params,
        labels: sub.labels,
        cohort_spec: p.manifest.cohort_spec(),
    }
}

/// Trains (or continues) one hierarchical model. `on_epoch` sees every
/// completed epoch.
pub fn train_hierarchical(
    p: &Prepared,
    config: &TrainConfig,
    resume: Option<&Checkpoint>,
    mut on_epoch: impl FnMut(&EpochRecord, &TrainState),
) -> Result<(Checkpoint, Vec<EpochRecord>)> {
    let state = match resume {
        Some(ck) => {
            ensure!(ck.kind == "hierarchical", "cannot resume a hierarchical run from a {} checkpoint", ck.kind);
            ensure!(
                ck.n_subjects == p.data.len(),
                "checkpoint has {} subjects, cohort has {}",
                ck.n_subjects,
                p.data.len()
            );
            ck.to_state()?
        }
        None => init(config, &p.data)?,
    };
    let (state, history) = train_from(state, &p.data, config, |r, s| {
        on_epoch(r, s);
        ControlFlow::Continue(())
    })?;
    let subjects: Vec<usize> = (0..p.data.len()).collect();
    Ok((Checkpoint::from_state(&state, config, "hierarchical", provenance(p, &subjects)), history))
}

/// Trains (or continues) one independent model per subject with the same
/// algorithm; member `j` sees only subject `j`.
pub fn train_ensemble_members(
    p: &Prepared,
    config: &TrainConfig,
    resume: Option<&[Checkpoint]>,
    mut on_epoch: impl FnMut(usize, &EpochRecord, &TrainState),
) -> Result<Vec<(Checkpoint, Vec<EpochRecord>)>> {
    if let Some(r) = resume {
        ensure!(r.len() == p.data.len(), "{} ensemble members for {} subjects", r.len(), p.data.len());
    }
    (0..p.data.len())
        .map(|j| {
            let cfg = ensemble_member(config, j);
            let sub = p.data.select(&[j]);
            let state = match resume {
                Some(r) => {
                    let ck = &r[j];
                    ensure!(
                        ck.kind == "ensemble-member" && ck.subjects == [j],
                        "resume member {j} is not the ensemble checkpoint of subject {j}"
                    );
                    ck.to_state()?
                }
                None => init(&cfg, &sub)?,
            };
            let (state, history) = train_from(state, &sub, &cfg, |r, s| {
                on_epoch(j, r, s);
                ControlFlow::Continue(())
            })
            .with_context(|| format!("ensemble member {j}"))?;
            Ok((Checkpoint::from_state(&state, &cfg, "ensemble-member", provenance(p, &[j])), history))
        })
        .collect()
}

fn progress_interval(epochs: usize) -> usize {
    (epochs / 20).max(1)
}

/// `train`: one or several seeded runs written under `out`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let runs = cfg.run.runs;
    ensure!(runs >= 1, "run.runs must be at least 1");
    ensure!(cfg.run.resume.is_none() || runs == 1, "run.resume continues a single run; set run.runs = 1");
    cfg.train.validate()?;
    let seed = cfg.seed();
    let loaded = load_cohort(&cfg.cohort, seed)?;
    if loaded.generated {
        cohort_io::write_cohort(&out.join("cohort"), &loaded.cohort, &loaded.manifest)?;
    }
    let prepared = prepare(&loaded, cfg.cohort.standardize)?;
    atomic::write_bytes(&out.join("resolved_config.toml"), toml::to_string(cfg)?.as_bytes())?;
    let dirs: Vec<PathBuf> = (0..runs)
        .map(|k| if runs == 1 { out.to_path_buf() } else { out.join(format!("run_{k}")) })
        .collect();
    let results: Vec<Result<()>> = (0..runs)
        .into_par_iter()
        .map(|k| {
            let config = TrainConfig {
                seed: seed.wrapping_add(k as u64),
                ..cfg.train.clone()
            };
            train_one(cfg, &prepared, &config, &dirs[k]).with_context(|| format!("run {k} (seed {})", config.seed))
        })
        .collect();
    let mut outcome = Outcome::default();
    let mut failures = 0;
    for r in results {
        if let Err(e) = r {
            failures += 1;
            if runs == 1 {
                return Err(e);
            }
            outcome.flag(format!("{e:#}"));
        }
    }
    if failures == runs {
        bail!("every run failed");
    }
    Ok(outcome)
}

fn write_loss(path: &Path, history: &[EpochRecord]) -> Result<()> {
    atomic::write_csv(path, Some(&["epoch", "loss", "alpha"]), history.iter().map(|r| (r.epoch, r.loss, r.alpha)))
}

fn train_one(cfg: &ExperimentConfig, p: &Prepared, config: &TrainConfig, dir: &Path) -> Result<()> {
    let every = cfg.run.checkpoint_every;
    let log_every = progress_interval(config.epochs);
    match cfg.run.mode {
        TrainMode::Hierarchical => {
            let resume = match &cfg.run.resume {
                Some(path) => Some(Checkpoint::load(path)?),
                None => None,
            };
            let prov = provenance(p, &(0..p.data.len()).collect::<Vec<_>>());
            let mut snapshot_err = None;
            let (ck, history) = train_hierarchical(p, config, resume.as_ref(), |r, s| {
                if r.epoch % log_every == 0 || r.epoch + 1 == config.epochs {
                    info!("seed {} epoch {} loss {:.5} alpha {:.4}", config.seed, r.epoch, r.loss, r.alpha);
                }
                if every > 0 && s.epoch % every == 0 && s.epoch < config.epochs {
                    let ck = Checkpoint::from_state(s, config, "hierarchical", prov.clone());
                    let path = dir.join("checkpoints").join(format!("epoch_{}.json", s.epoch));
                    if let Err(e) = ck.save(&path) {
                        snapshot_err.get_or_insert(e);
                    }
                }
            })?;
            if let Some(e) = snapshot_err {
                return Err(e.context("writing a snapshot"));
            }
            ck.save(&dir.join("checkpoint.json"))?;
            write_loss(&dir.join("loss.csv"), &history)?;
        }
        TrainMode::Ensemble => {
            let edir = dir.join("ensemble");
            let resume = match &cfg.run.resume {
                Some(path) => Some(checkpoint::load_run(path)?),
                None => None,
            };
            let members = train_ensemble_members(p, config, resume.as_deref(), |j, r, _| {
                if r.epoch % log_every == 0 || r.epoch + 1 == config.epochs {
                    info!("seed {} member {j} epoch {} loss {:.5}", config.seed, r.epoch, r.loss);
                }
            })?;
            let mut rows = Vec::new();
            for (j, (ck, history)) in members.iter().enumerate() {
                ck.save(&checkpoint::member_path(&edir, j))?;
                rows.extend(history.iter().map(|r| (j, r.epoch, r.loss, r.alpha)));
            }
            atomic::write_csv(&edir.join("loss.csv"), Some(&["member", "epoch", "loss", "alpha"]), rows)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- evaluation

/// Standardized long reference for cohort subject `j` of a checkpoint:
/// from `data` when given, otherwise re-simulated from the stored recipe.
pub fn reference_trajectory(ck: &Checkpoint, j: usize, n_steps: usize, data: Option<&Cohort>) -> Result<Trajectory> {
    let raw = match data {
        Some(c) => {
            ensure!(j < c.len(), "reference cohort has no subject {j}");
            c.subjects[j].clone()
        }
        None => {
            let spec = ck
                .cohort_spec
                .as_ref()
                .context("the checkpoint was trained on external data; set evaluate.cohort to supply references")?;
            ensure!(j < spec.subjects.len(), "stored recipe has no subject {j}");
            simulate_subject(spec, j, n_steps)?
        }
    };
    Ok(match &ck.scaling {
        Some(s) => s.apply(&raw, j)?,
        None => raw,
    })
}

/// Per-subject metrics of one run, ordered by cohort subject index, with
/// those indices.
pub fn evaluate_run(checkpoints: &[Checkpoint], cfg: &EvalConfig, data: Option<&Cohort>) -> Result<(Vec<usize>, MetricsReport)> {
    let mut jobs = Vec::new();
    for ck in checkpoints {
        for (model, &j) in ck.subject_models()?.into_iter().zip(&ck.subjects) {
            jobs.push((j, model, ck));
        }
    }
    jobs.sort_by_key(|(j, _, _)| *j);
    if let Some(w) = jobs.windows(2).find(|w| w[0].0 == w[1].0) {
        bail!("subject {} appears in more than one checkpoint of the run", w[0].0);
    }
    let reports = jobs
        .par_iter()
        .map(|(j, model, ck)| {
            let gt = reference_trajectory(ck, *j, cfg.n_steps, data)?;
            evaluate_subject(model, &gt, cfg).with_context(|| format!("subject {j}"))
        })
        .collect::<Result<Vec<_>>>()?;
    let n_obs = checkpoints[0].spec.n_obs;
    Ok((jobs.iter().map(|(j, _, _)| *j).collect(), MetricsReport::new(reports, cfg, n_obs)))
}

#[derive(Debug, Clone, Serialize)]
pub struct SubjectRow {
    pub run: usize,
    pub subject: usize,
    /// `null` in JSON for a diverged rollout.
    pub d_stsp: f64,
    pub d_h: f64,
    pub diverged: bool,
    pub diverged_step: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub source: PathBuf,
    pub median_d_stsp: f64,
    pub median_d_h: f64,
    pub mad_d_stsp: f64,
    pub mad_d_h: f64,
    pub n_diverged: usize,
    pub subjects: Vec<SubjectRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    pub n_steps: usize,
    pub transient: usize,
    pub bins_per_dim: usize,
    pub smoothing: f64,
    pub runs: Vec<RunReport>,
    pub summary: Summary,
}

/// `evaluate`: metrics of every run plus the cross-run summary.
pub fn cmd_evaluate(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let section = &cfg.evaluate;
    ensure!(!section.runs.is_empty(), "no runs to evaluate: pass --checkpoint or set evaluate.runs");
    for r in &section.runs {
        require_exists(r, "run")?;
    }
    let data = match &section.cohort {
        Some(dir) => {
            require_exists(dir, "reference cohort")?;
            Some(cohort_io::read_cohort(dir)?.0)
        }
        None => None,
    };
    let mut runs = Vec::new();
    for (k, path) in section.runs.iter().enumerate() {
        let cks = checkpoint::load_run(path)?;
        let (subjects, report) =
            evaluate_run(&cks, &section.metrics, data.as_ref()).with_context(|| format!("evaluating {}", path.display()))?;
        runs.push(RunReport {
            source: path.clone(),
            median_d_stsp: report.median_d_stsp,
            median_d_h: report.median_d_h,
            mad_d_stsp: report.mad_d_stsp,
            mad_d_h: report.mad_d_h,
            n_diverged: report.n_diverged,
            subjects: report
                .subjects
                .iter()
                .zip(&subjects)
                .map(|(s, &j)| SubjectRow {
                    run: k,
                    subject: j,
                    d_stsp: s.d_stsp,
                    d_h: s.d_h,
                    diverged: s.diverged,
                    diverged_step: s.diverged_step,
                })
                .collect(),
        });
        info!("run {k}: median D_stsp {:.4}, median D_H {:.4}", report.median_d_stsp, report.median_d_h);
    }
    let per_run: Vec<Vec<_>> = runs
        .iter()
        .map(|r| {
            r.subjects
                .iter()
                .map(|s| hdsr_core::eval::SubjectReport {
                    d_stsp: s.d_stsp,
                    d_h: s.d_h,
                    diverged: s.diverged,
                    diverged_step: s.diverged_step,
                })
                .collect()
        })
        .collect();
    let rows: Vec<SubjectRow> = runs.iter().flat_map(|r| r.subjects.iter().cloned()).collect();
    atomic::write_csv(&out.join("metrics.csv"), Some(&["run", "subject", "d_stsp", "d_h", "diverged", "diverged_step"]), &rows)?;
    let summary = aggregate(&per_run);
    let n_obs = checkpoint::load_run(&section.runs[0])?[0].spec.n_obs;
    if let Ok(summary) = &summary {
        let report = EvaluationReport {
            n_steps: section.metrics.n_steps,
            transient: section.metrics.transient,
            bins_per_dim: section.metrics.bins_per_dim.unwrap_or_else(|| default_bins_per_dim(n_obs)),
            smoothing: section.metrics.smoothing,
            runs,
            summary: summary.clone(),
        };
        atomic::write_json(&out.join("metrics.json"), &report)?;
    }
    let summary = summary?;
    let mut outcome = Outcome::default();
    if summary.n_diverged_subjects > 0 {
        outcome.flag(format!(
            "{} subject rollouts diverged ({} runs with a diverged median)",
            summary.n_diverged_subjects, summary.n_diverged_runs
        ));
    }
    Ok(outcome)
}

// ---------------------------------------------------------------- fine-tuning

/// Maps a new subject's raw observations into the model's coordinates.
pub fn standardize_new(ck: &Checkpoint, raw: &Trajectory) -> Result<Trajectory> {
    Ok(match &ck.scaling {
        None => raw.clone(),
        Some(s) if s.mode == StandardizeMode::Global => s.apply(raw, 0)?,
        // No statistics exist for an unseen subject; it uses its own.
        Some(_) => {
            let c = Cohort::new(vec![raw.clone()])?;
            standardize(&c, StandardizeMode::PerSubjectDimension)?.0.subjects.remove(0)
        }
    })
}

pub fn sigma_policy(ck: &Checkpoint, choice: SigmaChoice) -> SigmaPolicy {
    match choice {
        SigmaChoice::Profiled => SigmaPolicy::Profiled,
        SigmaChoice::TrainingMean => {
            let n = ck.spec.n_obs;
            let s = ck.sigma.len() as f64;
            SigmaPolicy::Frozen((0..n).map(|i| ck.sigma.iter().map(|v| v[i]).sum::<f64>() / s).collect())
        }
    }
}

/// Feature→parameter regression over the training subjects.
pub fn parameter_regression(ck: &Checkpoint, param_index: usize) -> Result<Option<(Regression, f64, f64)>> {
    let Some(gt) = &ck.gt_params else {
        return Ok(None);
    };
    let targets = gt
        .iter()
        .enumerate()
        .map(|(j, g)| g.get(param_index).copied().with_context(|| format!("subject {j} has no gt_params[{param_index}]")))
        .collect::<Result<Vec<f64>>>()?;
    let x = feature_matrix(&ck.features.iter().cloned().map(SubjectFeature).collect::<Vec<_>>())?;
    let reg = regress_features(&x, &targets)?;
    let lo = targets.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = targets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(Some((reg, lo, hi)))
}

#[derive(Debug, Clone, Serialize)]
pub struct RegressionSummary {
    pub param_index: usize,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub r_squared: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct UncertaintyOut {
    pub t_max: usize,
    pub n_resamples: usize,
    pub std: Vec<f64>,
    pub failures: usize,
    pub features: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FinetuneReport {
    pub feature: Vec<f64>,
    pub loss: f64,
    pub sigma: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub seconds: f64,
    pub predicted: Option<f64>,
    /// The prediction lies outside the training subjects' parameter range.
    pub extrapolated: Option<bool>,
    pub training_range: Option<[f64; 2]>,
    pub regression: Option<RegressionSummary>,
    pub uncertainty: Option<UncertaintyOut>,
    pub note: Option<String>,
}

/// Fits a new subject's feature on `raw` and maps it to a parameter value.
pub fn finetune(ck: &Checkpoint, raw: &Trajectory, section: &FinetuneSection, seed: u64) -> Result<FinetuneReport> {
    ensure!(ck.kind == "hierarchical", "fine-tuning needs a hierarchical checkpoint, got {}", ck.kind);
    let group = ck.group_params()?;
    let seq = standardize_new(ck, raw)?;
    let sigma = sigma_policy(ck, section.sigma);
    let mut fcfg = section.optimizer.clone();
    if fcfg.init.is_none() {
        let s = ck.features.len() as f64;
        fcfg.init = Some((0..ck.spec.n_feat).map(|i| ck.features.iter().map(|f| f[i]).sum::<f64>() / s).collect());
    }
    let method = if section.method == FineTuneMethod::Newton1d && ck.spec.n_feat != 1 {
        FineTuneMethod::Gradient
    } else {
        section.method
    };
    let t0 = Instant::now();
    let res = fine_tune_feature(&group, &sigma, &seq, &fcfg, method)?;
    let seconds = t0.elapsed().as_secs_f64();
    let mut report = FinetuneReport {
        feature: res.feature.0.clone(),
        loss: res.loss,
        sigma: res.sigma.clone(),
        iterations: res.iterations,
        converged: res.converged,
        seconds,
        predicted: None,
        extrapolated: None,
        training_range: None,
        regression: None,
        uncertainty: None,
        note: None,
    };
    if method != section.method {
        report.note = Some("newton1d needs a scalar feature; gradient descent was used".into());
    }
    match parameter_regression(ck, section.param_index)? {
        Some((reg, lo, hi)) => {
            let pred = reg.predict(&res.feature.0);
            report.predicted = Some(pred);
            report.extrapolated = Some(pred < lo || pred > hi);
            report.training_range = Some([lo, hi]);
            report.regression = Some(RegressionSummary {
                param_index: section.param_index,
                coefficients: reg.coefficients.clone(),
                intercept: reg.intercept,
                r_squared: reg.r_squared,
            });
        }
        None => report.note = Some("the checkpoint has no gt_params; no parameter prediction".into()),
    }
    if let Some(u) = &section.uncertainty {
        let r = feature_uncertainty(&group, &seq, u.t_max, u.n_resamples, &sigma, &fcfg, method, seed)?;
        report.uncertainty = Some(UncertaintyOut {
            t_max: u.t_max,
            n_resamples: u.n_resamples,
            std: r.std,
            failures: r.failures,
            features: r.features.into_iter().map(|f| f.0).collect(),
        });
    }
    Ok(report)
}

fn sequence_dt(ck: &Checkpoint, dt: Option<f64>) -> f64 {
    dt.or_else(|| ck.cohort_spec.as_ref().map(|s| s.dt)).unwrap_or(1.0)
}

/// `finetune`: writes `finetune.json`.
pub fn cmd_finetune(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let section = &cfg.finetune;
    let ck_path = section.checkpoint.as_ref().context("no checkpoint: pass --checkpoint or set finetune.checkpoint")?;
    let seq_path = section.sequence.as_ref().context("no sequence: pass --sequence or set finetune.sequence")?;
    require_exists(ck_path, "checkpoint")?;
    require_exists(seq_path, "sequence")?;
    let ck = Checkpoint::load(ck_path)?;
    let raw = cohort_io::read_trajectory(seq_path, sequence_dt(&ck, section.dt))?;
    let report = finetune(&ck, &raw, section, cfg.seed())?;
    atomic::write_json(&out.join("finetune.json"), &report)?;
    match report.predicted {
        Some(p) => info!(
            "feature {:?}, predicted parameter {p:.4}{}",
            report.feature,
            if report.extrapolated == Some(true) { " (extrapolated)" } else { "" }
        ),
        None => info!("feature {:?}", report.feature),
    }
    let mut outcome = Outcome::default();
    if !report.converged {
        outcome.flag(format!("fine-tuning hit the iteration cap after {} iterations", report.iterations));
    }
    if let Some(u) = &report.uncertainty {
        if u.failures > 0 {
            outcome.flag(format!("{} of {} resampled fits failed", u.failures, u.n_resamples));
        }
    }
    Ok(outcome)
}

// ---------------------------------------------------------------- analysis

fn nested(m: &Mat) -> Vec<Vec<f64>> {
    m.to_rows()
}

#[derive(Debug, Clone, Serialize)]
struct PcaOut {
    mean: Vec<f64>,
    components: Vec<Vec<f64>>,
    variances: Vec<f64>,
    explained_ratio: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct GmmOut {
    k: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
    log_likelihood: f64,
    assignments: Vec<usize>,
    accuracy: Option<f64>,
}

/// Absolute Pearson correlation of scalar features between run pairs; the
/// cosine structure of scalar features carries only their signs.
#[derive(Debug, Clone, Serialize)]
struct ScalarRobustness {
    mean: f64,
    pair_correlations: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct RobustnessOut {
    #[serde(flatten)]
    cosine: hdsr_core::analysis::Robustness,
    scalar: Option<ScalarRobustness>,
}

#[derive(Debug, Clone, Serialize)]
struct LandscapeOut {
    grid: Vec<f64>,
    loss: Vec<f64>,
    local_minima: usize,
    argmin: f64,
}

/// `analyze`: feature-space analyses of stored checkpoints.
pub fn cmd_analyze(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let section: &AnalyzeSection = &cfg.analyze;
    ensure!(!section.checkpoints.is_empty(), "no checkpoints: pass --checkpoint or set analyze.checkpoints");
    for p in &section.checkpoints {
        require_exists(p, "checkpoint")?;
    }
    let cks = section.checkpoints.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
    if let Some(c) = cks.iter().find(|c| c.kind != "hierarchical") {
        bail!("analysis needs hierarchical checkpoints, got {}", c.kind);
    }
    let explicit = !section.tasks.is_empty();
    let tasks: Vec<Task> = if explicit {
        section.tasks.clone()
    } else {
        let mut t = vec![Task::Pca, Task::Regression, Task::Gmm];
        if cks.len() > 1 {
            t.push(Task::Robustness);
        }
        if section.landscape.is_some() {
            t.push(Task::Landscape);
        }
        t
    };
    let ck = &cks[0];
    let feats: Vec<SubjectFeature> = ck.features.iter().cloned().map(SubjectFeature).collect();
    let x = feature_matrix(&feats)?;
    let nf = ck.spec.n_feat;
    let mut header: Vec<String> = vec!["subject".into()];
    header.extend((1..=nf).map(|i| format!("f{i}")));
    write_table(&out.join("features.csv"), &header, ck.subjects.iter().copied().zip(ck.features.iter().cloned()))?;
    let mut outcome = Outcome::default();
    for task in tasks {
        match task {
            Task::Pca => {
                let p = pca(&x)?;
                atomic::write_json(
                    &out.join("pca.json"),
                    &PcaOut {
                        mean: p.mean.clone(),
                        components: nested(&p.components),
                        variances: p.variances.clone(),
                        explained_ratio: p.explained_ratio.clone(),
                    },
                )?;
                let mut h: Vec<String> = vec!["subject".into()];
                h.extend((1..=p.scores.cols()).map(|i| format!("pc{i}")));
                write_table(&out.join("pca_scores.csv"), &h, (0..p.scores.rows()).map(|r| (ck.subjects[r], p.scores.row(r).to_vec())))?;
            }
            Task::Regression => {
                let Some(gt) = &ck.gt_params else {
                    let msg = "regression disabled: the checkpoint's cohort has no gt_params".to_string();
                    if explicit {
                        outcome.flag(msg);
                    } else {
                        info!("{msg}");
                    }
                    continue;
                };
                let n_params = gt.first().map_or(0, Vec::len);
                let mut summaries = Vec::new();
                let mut rows = Vec::new();
                for k in 0..n_params {
                    let (reg, _, _) = parameter_regression(ck, k)?.expect("gt_params present");
                    for (r, (j, g)) in ck.subjects.iter().zip(gt).enumerate() {
                        rows.push((k, *j, g[k], reg.fitted[r]));
                    }
                    summaries.push(RegressionSummary {
                        param_index: k,
                        coefficients: reg.coefficients,
                        intercept: reg.intercept,
                        r_squared: reg.r_squared,
                    });
                }
                atomic::write_json(&out.join("regression.json"), &summaries)?;
                atomic::write_csv(&out.join("regression.csv"), Some(&["param_index", "subject", "target", "fitted"]), rows)?;
            }
            Task::Gmm => {
                ensure!(section.gmm_k >= 1 && section.gmm_k <= x.rows(), "analyze.gmm_k must lie in [1, S]");
                let fit = gmm_fit(&x, section.gmm_k, section.gmm_n_init.max(1), cfg.seed())?;
                let assignments = gmm_assign(&fit.model, &x);
                let accuracy = match &ck.labels {
                    Some(l) => Some(cluster_accuracy(&assignments, l)?),
                    None => None,
                };
                atomic::write_csv(
                    &out.join("gmm_labels.csv"),
                    Some(&["subject", "cluster", "label"]),
                    ck.subjects
                        .iter()
                        .zip(&assignments)
                        .enumerate()
                        .map(|(r, (j, c))| (*j, *c, ck.labels.as_ref().map(|l| l[r]))),
                )?;
                atomic::write_json(
                    &out.join("gmm.json"),
                    &GmmOut {
                        k: fit.model.k(),
                        weights: fit.model.weights.clone(),
                        means: nested(&fit.model.means),
                        variances: nested(&fit.model.variances),
                        log_likelihood: fit.log_likelihood,
                        assignments,
                        accuracy,
                    },
                )?;
            }
            Task::Robustness => {
                ensure!(cks.len() >= 2, "robustness compares runs: pass at least two checkpoints");
                let mats = cks
                    .iter()
                    .map(|c| feature_matrix(&c.features.iter().cloned().map(SubjectFeature).collect::<Vec<_>>()))
                    .collect::<hdsr_core::Result<Vec<_>>>()?;
                let cosine = feature_robustness(&mats)?;
                let scalar = (nf == 1 && cks.iter().all(|c| c.spec.n_feat == 1)).then(|| {
                    let mut pairs = Vec::new();
                    for a in 0..mats.len() {
                        for b in a + 1..mats.len() {
                            pairs.push(pearson(&mats[a].column(0), &mats[b].column(0)).abs());
                        }
                    }
                    ScalarRobustness {
                        mean: pairs.iter().sum::<f64>() / pairs.len() as f64,
                        pair_correlations: pairs,
                    }
                });
                atomic::write_json(&out.join("robustness.json"), &RobustnessOut { cosine, scalar })?;
            }
            Task::Landscape => {
                let l = section.landscape.as_ref().context("landscape task needs an [analyze.landscape] table")?;
                require_exists(&l.sequence, "landscape sequence")?;
                ensure!(nf == 1, "landscape scans need a scalar feature (N_feat = 1)");
                ensure!(l.points >= 3, "analyze.landscape.points must be at least 3");
                let raw = cohort_io::read_trajectory(&l.sequence, sequence_dt(ck, l.dt))?;
                let seq = standardize_new(ck, &raw)?;
                let (flo, fhi) = ck.features.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, f| (a.0.min(f[0]), a.1.max(f[0])));
                let width = (fhi - flo).max(1e-3);
                let lo = l.min.unwrap_or(flo - width);
                let hi = l.max.unwrap_or(fhi + width);
                ensure!(lo < hi, "landscape grid is empty");
                let grid = presets::linspace(lo, hi, l.points);
                let group = ck.group_params()?;
                let loss = loss_landscape_scan(
                    &group,
                    &seq,
                    &grid,
                    &sigma_policy(ck, cfg.finetune.sigma),
                    &cfg.finetune.optimizer,
                )?;
                let best = (0..grid.len()).min_by(|&a, &b| loss[a].total_cmp(&loss[b])).unwrap_or(0);
                atomic::write_csv(&out.join("landscape.csv"), Some(&["feature", "loss"]), grid.iter().zip(&loss))?;
                atomic::write_json(
                    &out.join("landscape.json"),
                    &LandscapeOut {
                        local_minima: count_local_minima(&loss),
                        argmin: grid[best],
                        grid,
                        loss,
                    },
                )?;
            }
        }
    }
    Ok(outcome)
}

/// Rows of a subject index followed by a variable number of values.
fn write_table(path: &Path, header: &[String], rows: impl IntoIterator<Item = (usize, Vec<f64>)>) -> Result<()> {
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = rows.into_iter().map(|(j, v)| {
        let mut r = vec![j.to_string()];
        r.extend(v.iter().map(f64::to_string));
        r
    });
    atomic::write_csv(path, Some(&h), rows)
}
