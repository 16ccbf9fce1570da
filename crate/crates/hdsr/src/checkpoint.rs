//! Checkpoint JSON: architecture, group blocks as row-major nested arrays,
//! subject features, noise diagonals, optimizer moments, epoch counter and
//! sampler position, plus the provenance needed by downstream commands.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use hdsr_core::dynsys::{CohortSpec, ScalingRecord};
use hdsr_core::model::{materialize, Block, GroupParams, ModelSpec, SubjectFeature, SubjectModel};
use hdsr_core::rng::RngState;
use hdsr_core::train::{NoiseScale, OptimizerState, TrainConfig, TrainState};
use serde::{Deserialize, Serialize};

use crate::atomic;

pub const FORMAT: &str = "hdsr-checkpoint";
pub const VERSION: u32 = 1;
/// `mat(v, m, n)` fills rows first.
pub const RESHAPE: &str = "row-major";

/// One group parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockRecord {
    pub block: Block,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub reshape: String,
    /// `hierarchical` or `ensemble-member`.
    pub kind: String,
    pub spec: ModelSpec,
    pub n_subjects: usize,
    /// Cohort indices of the subjects, in feature order.
    pub subjects: Vec<usize>,
    pub group: Vec<BlockRecord>,
    pub features: Vec<Vec<f64>>,
    /// Noise covariance diagonals.
    pub sigma: Vec<Vec<f64>>,
    /// Their logarithms, the trained parameterization.
    pub log_sigma: Vec<Vec<f64>>,
    pub optimizer: OptimizerState,
    pub epoch: usize,
    pub rng: RngState,
    pub train: TrainConfig,
    pub scaling: Option<ScalingRecord>,
    pub gt_params: Option<Vec<Vec<f64>>>,
    pub labels: Option<Vec<i64>>,
    /// Recipe of a simulated training cohort, for long reference trajectories.
    pub cohort_spec: Option<CohortSpec>,
}

/// Provenance stored next to the trained state.
#[derive(Debug, Clone, Default)]
pub struct Provenance {
    pub subjects: Vec<usize>,
    pub scaling: Option<ScalingRecord>,
    pub gt_params: Option<Vec<Vec<f64>>>,
    pub labels: Option<Vec<i64>>,
    pub cohort_spec: Option<CohortSpec>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, config: &TrainConfig, kind: &str, prov: Provenance) -> Self {
        let group = state
            .group
            .blocks()
            .iter()
            .map(|b| {
                let v = &state.group.values()[b.range()];
                BlockRecord {
                    block: b.block,
                    rows: b.rows,
                    cols: b.cols,
                    values: v.chunks(b.cols.max(1)).map(<[f64]>::to_vec).collect(),
                }
            })
            .collect();
        Self {
            format: FORMAT.into(),
            version: VERSION,
            reshape: RESHAPE.into(),
            kind: kind.into(),
            spec: *state.group.spec(),
            n_subjects: state.features.len(),
            subjects: prov.subjects,
            group,
            features: state.features.iter().map(|f| f.0.clone()).collect(),
            sigma: state.noise.iter().map(NoiseScale::sigma).collect(),
            log_sigma: state.noise.iter().map(|n| n.log_sigma.clone()).collect(),
            optimizer: state.optimizer.clone(),
            epoch: state.epoch,
            rng: state.rng,
            train: config.clone(),
            scaling: prov.scaling,
            gt_params: prov.gt_params,
            labels: prov.labels,
            cohort_spec: prov.cohort_spec,
        }
    }

    pub fn group_params(&self) -> Result<GroupParams> {
        let template = GroupParams::zeros(self.spec)?;
        ensure!(
            template.blocks().len() == self.group.len(),
            "checkpoint has {} group blocks, the architecture needs {}",
            self.group.len(),
            template.blocks().len()
        );
        let mut values = Vec::with_capacity(template.len());
        for (want, got) in template.blocks().iter().zip(&self.group) {
            ensure!(
                want.block == got.block && want.rows == got.rows && want.cols == got.cols,
                "group block {:?} ({}×{}) does not match the layout entry {:?} ({}×{})",
                got.block,
                got.rows,
                got.cols,
                want.block,
                want.rows,
                want.cols
            );
            ensure!(
                got.values.len() == got.rows && got.values.iter().all(|r| r.len() == got.cols),
                "group block {:?} is not a {}×{} array",
                got.block,
                got.rows,
                got.cols
            );
            values.extend(got.values.iter().flatten());
        }
        Ok(GroupParams::from_values(self.spec, values)?)
    }

    pub fn to_state(&self) -> Result<TrainState> {
        self.validate()?;
        Ok(TrainState {
            group: self.group_params()?,
            features: self.features.iter().cloned().map(SubjectFeature).collect(),
            noise: self
                .log_sigma
                .iter()
                .map(|l| NoiseScale { log_sigma: l.clone() })
                .collect(),
            optimizer: self.optimizer.clone(),
            epoch: self.epoch,
            rng: self.rng,
        })
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.format == FORMAT, "not an {FORMAT} document (format {:?})", self.format);
        ensure!(self.version == VERSION, "unsupported checkpoint version {}", self.version);
        ensure!(self.reshape == RESHAPE, "unsupported reshaping convention {:?}", self.reshape);
        let s = self.n_subjects;
        ensure!(
            self.features.len() == s && self.log_sigma.len() == s && self.subjects.len() == s,
            "checkpoint lists {s} subjects but {} features, {} noise vectors and {} indices",
            self.features.len(),
            self.log_sigma.len(),
            self.subjects.len()
        );
        if let Some(j) = self.features.iter().position(|f| f.len() != self.spec.n_feat) {
            bail!("feature {j} has length {}, N_feat is {}", self.features[j].len(), self.spec.n_feat);
        }
        if let Some(j) = self.log_sigma.iter().position(|n| n.len() != self.spec.n_obs) {
            bail!("noise vector {j} has length {}, N is {}", self.log_sigma[j].len(), self.spec.n_obs);
        }
        Ok(())
    }

    /// Materialized model of every stored subject.
    pub fn subject_models(&self) -> Result<Vec<SubjectModel>> {
        let group = self.group_params()?;
        self.features
            .iter()
            .map(|f| Ok(materialize(&group, &SubjectFeature(f.clone()))?))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let ck: Checkpoint = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        ck.validate().with_context(|| format!("checking {}", path.display()))?;
        Ok(ck)
    }
}

/// Checkpoints making up one trained run: a single hierarchical file or a
/// directory of `member_<j>.json` ensemble members.
pub fn load_run(path: &Path) -> Result<Vec<Checkpoint>> {
    if path.is_dir() {
        let members = member_paths(path)?;
        ensure!(!members.is_empty(), "{} holds no member_<j>.json checkpoints", path.display());
        members.iter().map(|p| Checkpoint::load(p)).collect()
    } else {
        Ok(vec![Checkpoint::load(path)?])
    }
}

/// Ensemble member files of `dir`, in subject order.
pub fn member_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found: Vec<(usize, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(j) = name.strip_prefix("member_").and_then(|r| r.strip_suffix(".json")).and_then(|r| r.parse().ok()) {
            found.push((j, path));
        }
    }
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

pub fn member_path(dir: &Path, j: usize) -> PathBuf {
    dir.join(format!("member_{j}.json"))
}
