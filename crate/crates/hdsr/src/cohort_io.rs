//! Cohort directories: `manifest.json` plus one headerless `subject_<j>.csv`
//! per subject.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hdsr_core::dynsys::{Cohort, CohortSpec, SubjectSpec, SystemParams, Trajectory};
use serde::{Deserialize, Serialize};

use crate::atomic;

pub const MANIFEST: &str = "manifest.json";

/// Cohort metadata. Only `dt` is needed for user-provided data; simulated
/// cohorts also record how to regenerate every subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default)]
    pub n_subjects: Option<usize>,
    #[serde(default)]
    pub n_obs: Option<usize>,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub t_max: Option<Vec<usize>>,
    #[serde(default)]
    pub gt_params: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub labels: Option<Vec<i64>>,
    /// Seed of the per-subject initial-condition and noise streams.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub systems: Option<Vec<SystemParams>>,
    #[serde(default)]
    pub transient_steps: Option<usize>,
    #[serde(default)]
    pub noise_fraction: Option<f64>,
}

fn default_dt() -> f64 {
    1.0
}

impl Manifest {
    /// Description of a simulated cohort.
    pub fn from_spec(spec: &CohortSpec, cohort: &Cohort) -> Self {
        Self {
            name: Some(spec.name.clone()),
            n_subjects: Some(cohort.len()),
            n_obs: Some(cohort.dim()),
            dt: spec.dt,
            t_max: Some(cohort.subjects.iter().map(Trajectory::len).collect()),
            gt_params: cohort.gt_params.clone(),
            labels: cohort.labels.clone(),
            seed: Some(spec.seed),
            systems: Some(spec.subjects.iter().map(|s| s.system).collect()),
            transient_steps: Some(spec.transient_steps),
            noise_fraction: Some(spec.noise_fraction),
        }
    }

    /// The recipe that produced the cohort, when it was simulated.
    pub fn cohort_spec(&self) -> Option<CohortSpec> {
        let systems = self.systems.as_ref()?;
        let t_max = self.t_max.clone().unwrap_or_else(|| vec![0; systems.len()]);
        let subjects = systems
            .iter()
            .enumerate()
            .map(|(j, &system)| SubjectSpec {
                system,
                t_max: t_max.get(j).copied().unwrap_or(0),
                gt_params: self.gt_params.as_ref().map(|g| g[j].clone()).unwrap_or_default(),
                label: self.labels.as_ref().map(|l| l[j]),
            })
            .collect();
        Some(CohortSpec {
            name: self.name.clone().unwrap_or_default(),
            subjects,
            dt: self.dt,
            transient_steps: self.transient_steps?,
            noise_fraction: self.noise_fraction.unwrap_or(0.0),
            seed: self.seed?,
        })
    }
}

pub fn subject_path(dir: &Path, j: usize) -> PathBuf {
    dir.join(format!("subject_{j}.csv"))
}

/// Writes the manifest and every subject CSV.
pub fn write_cohort(dir: &Path, cohort: &Cohort, manifest: &Manifest) -> Result<()> {
    for (j, s) in cohort.subjects.iter().enumerate() {
        write_trajectory(&subject_path(dir, j), s)?;
    }
    atomic::write_json(&dir.join(MANIFEST), manifest)
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    atomic::write_csv(path, None, (0..traj.len()).map(|t| traj.row(t)))
}

/// Reads a headerless numeric CSV.
pub fn read_trajectory(path: &Path, dt: f64) -> Result<Trajectory> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (t, rec) in rdr.deserialize().enumerate() {
        let row: Vec<f64> = rec.with_context(|| format!("{}: row {}", path.display(), t + 1))?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                bail!("{}: row {} has {} columns, expected {}", path.display(), t + 1, row.len(), first.len());
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        bail!("{} holds no samples", path.display());
    }
    Trajectory::from_rows(&rows, dt).with_context(|| format!("reading {}", path.display()))
}

/// Reads a cohort directory. Without a manifest, consecutive
/// `subject_<j>.csv` files starting at 0 are taken with `dt = 1`.
pub fn read_cohort(dir: &Path) -> Result<(Cohort, Manifest)> {
    let mpath = dir.join(MANIFEST);
    let manifest: Manifest = if mpath.exists() {
        let text = std::fs::read_to_string(&mpath).with_context(|| format!("reading {}", mpath.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", mpath.display()))?
    } else {
        serde_json::from_str("{}")?
    };
    let n = match manifest.n_subjects {
        Some(n) => n,
        None => (0..).take_while(|&j| subject_path(dir, j).exists()).count(),
    };
    if n == 0 {
        bail!("{} contains no subject_<j>.csv files", dir.display());
    }
    let subjects = (0..n)
        .map(|j| read_trajectory(&subject_path(dir, j), manifest.dt))
        .collect::<Result<Vec<_>>>()?;
    if let Some(t_max) = &manifest.t_max {
        for (j, (s, &t)) in subjects.iter().zip(t_max).enumerate() {
            if s.len() != t {
                bail!("subject {j}: manifest lists {t} samples, file has {}", s.len());
            }
        }
    }
    if let Some(n_obs) = manifest.n_obs {
        if let Some(j) = subjects.iter().position(|s| s.dim() != n_obs) {
            bail!("subject {j}: {} columns, manifest lists {n_obs}", subjects[j].dim());
        }
    }
    let cohort = Cohort {
        subjects,
        gt_params: manifest.gt_params.clone(),
        labels: manifest.labels.clone(),
        systems: manifest.systems.clone(),
        seed: manifest.seed,
    };
    cohort.validate()?;
    Ok((cohort, manifest))
}
