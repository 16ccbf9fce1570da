//! The shallow PLRNN / vanilla RNN flow maps, observation models and the
//! hierarchization schemes that turn a subject feature vector into a
//! subject's weights.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::dynsys::Trajectory;
use crate::linalg::Mat;
use crate::math::tanh;
use crate::{Error, Result};

/// Recurrent backbone generating the latent flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Backbone {
    #[default]
    ShPlrnn,
    Vanilla,
}

/// How feature vectors are mapped onto weight matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Scheme {
    /// `W = mat(l · P_W)` for every weight matrix.
    #[default]
    NaiveLinear,
    /// `W = U diag(a) Q` with `a = R l` when `N_feat < M`, else `a = l`.
    OuterProduct,
}

/// Whether the outer-product lift matrix `R` is optimized or kept at its
/// random initial value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum LiftMode {
    #[default]
    Trained,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum ObsKind {
    /// `x̂ = z`; requires `M = N`.
    #[default]
    Identity,
    /// One `B` shared by all subjects.
    SharedLinear,
    /// `B = mat(l · P_B, N, M)` per subject.
    SubjectLinear,
}

/// Architecture and sizes of a hierarchical model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelSpec {
    pub backbone: Backbone,
    pub scheme: Scheme,
    pub lift: LiftMode,
    pub obs: ObsKind,
    /// Observation dimension N.
    pub n_obs: usize,
    /// Latent dimension M.
    pub latent: usize,
    /// Hidden dimension L (unused by the vanilla backbone).
    pub hidden: usize,
    pub n_feat: usize,
}

impl ModelSpec {
    /// shPLRNN with identity observations, `M = N` and `L = 20·M`.
    pub fn shplrnn(n_obs: usize, n_feat: usize) -> Self {
        Self {
            backbone: Backbone::ShPlrnn,
            scheme: Scheme::NaiveLinear,
            lift: LiftMode::Trained,
            obs: ObsKind::Identity,
            n_obs,
            latent: n_obs,
            hidden: 20 * n_obs,
            n_feat,
        }
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_obs == 0 || self.latent == 0 || self.n_feat == 0 {
            return Err(Error::Shape("model dimensions must be positive".into()));
        }
        if self.backbone == Backbone::ShPlrnn && self.hidden == 0 {
            return Err(Error::Shape("shPLRNN hidden size must be positive".into()));
        }
        if self.obs == ObsKind::Identity && self.latent != self.n_obs {
            return Err(Error::Shape(format!(
                "identity observation needs M = N (M = {}, N = {})",
                self.latent, self.n_obs
            )));
        }
        Ok(())
    }

    /// True when the outer-product scheme lifts features to `M` dimensions.
    pub fn uses_lift(&self) -> bool {
        self.scheme == Scheme::OuterProduct && self.n_feat < self.latent
    }

    /// Width of the diagonal in the outer-product factorization.
    pub fn rank(&self) -> usize {
        if self.uses_lift() {
            self.latent
        } else {
            self.n_feat
        }
    }
}

/// Named blocks of the flat group parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Block {
    /// `N_feat × M`, diagonal of A.
    PA,
    /// `N_feat × (M·L)`
    PW1,
    /// `N_feat × (L·M)`
    PW2,
    PH1,
    PH2,
    /// Outer-product factors for W1: `M × r` and `r × L`.
    UW1,
    QW1,
    /// Outer-product factors for W2: `L × r` and `r × M`.
    UW2,
    QW2,
    /// Vanilla recurrent matrix projection `N_feat × (M·M)`.
    PW,
    /// Vanilla bias projection `N_feat × M`.
    PB,
    UW,
    QW,
    /// Feature lift `R`, `M × N_feat`.
    Lift,
    /// Shared observation matrix `N × M`.
    ObsB,
    /// Observation projection `N_feat × (N·M)`.
    PObs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BlockInfo {
    pub block: Block,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl BlockInfo {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Block shapes for a model spec, in storage order.
pub fn layout(spec: &ModelSpec) -> Vec<BlockInfo> {
    let (nf, m, l, n) = (spec.n_feat, spec.latent, spec.hidden, spec.n_obs);
    let r = spec.rank();
    let mut shapes: Vec<(Block, usize, usize)> = Vec::new();
    match (spec.backbone, spec.scheme) {
        (Backbone::ShPlrnn, Scheme::NaiveLinear) => shapes.extend([
            (Block::PA, nf, m),
            (Block::PW1, nf, m * l),
            (Block::PW2, nf, l * m),
            (Block::PH1, nf, m),
            (Block::PH2, nf, l),
        ]),
        (Backbone::ShPlrnn, Scheme::OuterProduct) => shapes.extend([
            (Block::PA, nf, m),
            (Block::UW1, m, r),
            (Block::QW1, r, l),
            (Block::UW2, l, r),
            (Block::QW2, r, m),
            (Block::PH1, nf, m),
            (Block::PH2, nf, l),
        ]),
        (Backbone::Vanilla, Scheme::NaiveLinear) => {
            shapes.extend([(Block::PW, nf, m * m), (Block::PB, nf, m)])
        }
        (Backbone::Vanilla, Scheme::OuterProduct) => shapes.extend([
            (Block::UW, m, r),
            (Block::QW, r, m),
            (Block::PB, nf, m),
        ]),
    }
    if spec.uses_lift() {
        shapes.push((Block::Lift, m, nf));
    }
    match spec.obs {
        ObsKind::Identity => {}
        ObsKind::SharedLinear => shapes.push((Block::ObsB, n, m)),
        ObsKind::SubjectLinear => shapes.push((Block::PObs, nf, n * m)),
    }
    let mut offset = 0;
    shapes
        .into_iter()
        .map(|(block, rows, cols)| {
            let info = BlockInfo {
                block,
                offset,
                rows,
                cols,
            };
            offset += rows * cols;
            info
        })
        .collect()
}

/// Learnable low-dimensional description of one subject.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(transparent))]
pub struct SubjectFeature(pub Vec<f64>);

impl SubjectFeature {
    pub fn zeros(n_feat: usize) -> Self {
        Self(vec![0.0; n_feat])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Group-level projections shared by all subjects, stored as one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupParams {
    spec: ModelSpec,
    blocks: Vec<BlockInfo>,
    values: Vec<f64>,
}

impl GroupParams {
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let blocks = layout(&spec);
        let total = blocks.last().map_or(0, |b| b.offset + b.len());
        Ok(Self {
            spec,
            blocks,
            values: vec![0.0; total],
        })
    }

    pub fn from_values(spec: ModelSpec, values: Vec<f64>) -> Result<Self> {
        let mut g = Self::zeros(spec)?;
        if values.len() != g.values.len() {
            return Err(Error::Shape(format!(
                "{} group values, layout needs {}",
                values.len(),
                g.values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite group parameter".into()));
        }
        g.values = values;
        Ok(g)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn blocks(&self) -> &[BlockInfo] {
        &self.blocks
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn info(&self, block: Block) -> Option<BlockInfo> {
        self.blocks.iter().copied().find(|b| b.block == block)
    }

    /// Row-major contents of `block`.
    ///
    /// Panics if the block is absent from this layout.
    pub fn block(&self, block: Block) -> &[f64] {
        let info = self.info(block).expect("block present in layout");
        &self.values[info.range()]
    }

    pub fn block_mut(&mut self, block: Block) -> &mut [f64] {
        let info = self.info(block).expect("block present in layout");
        &mut self.values[info.range()]
    }

    /// Number of group-level parameters.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Mask of entries the optimizer may touch (a fixed lift is excluded).
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![true; self.values.len()];
        if self.spec.lift == LiftMode::Fixed {
            if let Some(info) = self.info(Block::Lift) {
                mask[info.range()].iter_mut().for_each(|m| *m = false);
            }
        }
        mask
    }

    pub fn n_trainable(&self) -> usize {
        self.trainable_mask().iter().filter(|&&m| m).count()
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    fn check_feature(&self, l: &SubjectFeature) -> Result<()> {
        if l.len() != self.spec.n_feat {
            return Err(Error::Shape(format!(
                "feature has {} entries, model expects {}",
                l.len(),
                self.spec.n_feat
            )));
        }
        if !l.0.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite feature".into()));
        }
        Ok(())
    }

    /// Diagonal weights `a` of the outer-product scheme.
    fn outer_diag(&self, l: &[f64]) -> Vec<f64> {
        if self.spec.uses_lift() {
            let r = self.block(Block::Lift);
            let nf = self.spec.n_feat;
            (0..self.spec.latent)
                .map(|i| (0..nf).map(|f| r[i * nf + f] * l[f]).sum())
                .collect()
        } else {
            l.to_vec()
        }
    }
}

/// `l · P` for a `N_feat × K` block.
fn project(p: &[f64], l: &[f64]) -> Vec<f64> {
    let k = p.len() / l.len();
    let mut out = vec![0.0; k];
    for (f, &lf) in l.iter().enumerate() {
        if lf == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(&p[f * k..(f + 1) * k]) {
            *o += lf * v;
        }
    }
    out
}

/// Adjoint of [`project`]: accumulates `∂P` and `∂l` from `∂(l·P)`.
fn project_backward(p: &[f64], l: &[f64], d_out: &[f64], d_p: &mut [f64], d_l: &mut [f64]) {
    let k = d_out.len();
    for (f, &lf) in l.iter().enumerate() {
        let row = &p[f * k..(f + 1) * k];
        d_l[f] += row.iter().zip(d_out).map(|(a, b)| a * b).sum::<f64>();
        for (dp, g) in d_p[f * k..(f + 1) * k].iter_mut().zip(d_out) {
            *dp += lf * g;
        }
    }
}

/// `U diag(a) Q` with `U: rows × r`, `Q: r × cols`.
fn outer_product(u: &[f64], a: &[f64], q: &[f64], rows: usize, cols: usize) -> Mat {
    let r = a.len();
    let mut w = Mat::zeros(rows, cols);
    for i in 0..rows {
        let dst = w.row_mut(i);
        for k in 0..r {
            let s = u[i * r + k] * a[k];
            if s == 0.0 {
                continue;
            }
            for (d, qv) in dst.iter_mut().zip(&q[k * cols..(k + 1) * cols]) {
                *d += s * qv;
            }
        }
    }
    w
}

/// Adjoint of [`outer_product`].
#[allow(clippy::too_many_arguments)]
fn outer_product_backward(
    u: &[f64],
    a: &[f64],
    q: &[f64],
    d_w: &Mat,
    d_u: &mut [f64],
    d_a: &mut [f64],
    d_q: &mut [f64],
) {
    let (rows, cols) = (d_w.rows(), d_w.cols());
    let r = a.len();
    for i in 0..rows {
        let dwr = d_w.row(i);
        for k in 0..r {
            let qk = &q[k * cols..(k + 1) * cols];
            // G[i,k] = Σ_j dW[i,j] Q[k,j]
            let g: f64 = dwr.iter().zip(qk).map(|(x, y)| x * y).sum();
            d_u[i * r + k] += a[k] * g;
            d_a[k] += u[i * r + k] * g;
            let s = a[k] * u[i * r + k];
            if s != 0.0 {
                for (dq, x) in d_q[k * cols..(k + 1) * cols].iter_mut().zip(dwr) {
                    *dq += s * x;
                }
            }
        }
    }
}

/// Subject weights of the shallow PLRNN `z ↦ A⊙z + W1·relu(W2·z + h2) + h1`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ShplrnnParams {
    /// Diagonal of A.
    pub a: Vec<f64>,
    /// `M × L`
    pub w1: Mat,
    /// `L × M`
    pub w2: Mat,
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
}

impl ShplrnnParams {
    pub fn zeros(m: usize, l: usize) -> Self {
        Self {
            a: vec![0.0; m],
            w1: Mat::zeros(m, l),
            w2: Mat::zeros(l, m),
            h1: vec![0.0; m],
            h2: vec![0.0; l],
        }
    }

    pub fn latent(&self) -> usize {
        self.a.len()
    }

    pub fn hidden(&self) -> usize {
        self.h2.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (m, l) = (self.latent(), self.hidden());
        let ok = self.w1.rows() == m
            && self.w1.cols() == l
            && self.w2.rows() == l
            && self.w2.cols() == m
            && self.h1.len() == m;
        if !ok {
            return Err(Error::Shape("inconsistent shPLRNN parameter shapes".into()));
        }
        Ok(())
    }
}

/// Subject weights of `z ↦ tanh(W·z + b)`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VanillaRnnParams {
    pub w: Mat,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum FlowParams {
    ShPlrnn(ShplrnnParams),
    Vanilla(VanillaRnnParams),
}

impl FlowParams {
    pub fn latent(&self) -> usize {
        match self {
            FlowParams::ShPlrnn(p) => p.latent(),
            FlowParams::Vanilla(p) => p.b.len(),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            FlowParams::ShPlrnn(p) => {
                p.a.iter().chain(&p.h1).chain(&p.h2).all(|v| v.is_finite())
                    && p.w1.is_finite()
                    && p.w2.is_finite()
            }
            FlowParams::Vanilla(p) => p.w.is_finite() && p.b.iter().all(|v| v.is_finite()),
        }
    }

    /// One application of the flow map.
    pub fn step(&self, z: &[f64]) -> Vec<f64> {
        match self {
            FlowParams::ShPlrnn(p) => shplrnn_step(p, z),
            FlowParams::Vanilla(p) => vanilla_rnn_step(p, z),
        }
    }
}

/// Observation function `x̂ = h(z)`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Observation {
    Identity,
    /// `N × M` matrix.
    Linear(Mat),
}

/// Fully materialized model of one subject.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SubjectModel {
    pub flow: FlowParams,
    pub obs: Observation,
}

impl SubjectModel {
    pub fn shplrnn(params: ShplrnnParams) -> Self {
        Self {
            flow: FlowParams::ShPlrnn(params),
            obs: Observation::Identity,
        }
    }

    /// Data-inferred latent state for observation `x`: `x` itself for the
    /// identity model, the least-squares pre-image `B⁺x` otherwise.
    pub fn teacher_state(&self, x: &[f64]) -> Vec<f64> {
        match &self.obs {
            Observation::Identity => x.to_vec(),
            Observation::Linear(b) => b.pseudo_inverse().mul_vec(x),
        }
    }
}

/// Maps a subject feature onto that subject's model weights.
pub fn materialize(group: &GroupParams, l: &SubjectFeature) -> Result<SubjectModel> {
    group.check_feature(l)?;
    let spec = group.spec;
    let (m, h, n) = (spec.latent, spec.hidden, spec.n_obs);
    let lv = l.as_slice();
    let flow = match (spec.backbone, spec.scheme) {
        (Backbone::ShPlrnn, scheme) => {
            let a = project(group.block(Block::PA), lv);
            let (w1, w2) = match scheme {
                Scheme::NaiveLinear => (
                    Mat::from_vec(m, h, project(group.block(Block::PW1), lv))?,
                    Mat::from_vec(h, m, project(group.block(Block::PW2), lv))?,
                ),
                Scheme::OuterProduct => {
                    let d = group.outer_diag(lv);
                    (
                        outer_product(group.block(Block::UW1), &d, group.block(Block::QW1), m, h),
                        outer_product(group.block(Block::UW2), &d, group.block(Block::QW2), h, m),
                    )
                }
            };
            FlowParams::ShPlrnn(ShplrnnParams {
                a,
                w1,
                w2,
                h1: project(group.block(Block::PH1), lv),
                h2: project(group.block(Block::PH2), lv),
            })
        }
        (Backbone::Vanilla, scheme) => {
            let w = match scheme {
                Scheme::NaiveLinear => Mat::from_vec(m, m, project(group.block(Block::PW), lv))?,
                Scheme::OuterProduct => {
                    let d = group.outer_diag(lv);
                    outer_product(group.block(Block::UW), &d, group.block(Block::QW), m, m)
                }
            };
            FlowParams::Vanilla(VanillaRnnParams {
                w,
                b: project(group.block(Block::PB), lv),
            })
        }
    };
    let obs = match spec.obs {
        ObsKind::Identity => Observation::Identity,
        ObsKind::SharedLinear => Observation::Linear(Mat::from_vec(n, m, group.block(Block::ObsB).to_vec())?),
        ObsKind::SubjectLinear => Observation::Linear(Mat::from_vec(n, m, project(group.block(Block::PObs), lv))?),
    };
    Ok(SubjectModel { flow, obs })
}

/// Gradient with respect to one subject's materialized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectGrad {
    pub flow: FlowParams,
    /// `∂B` when the observation model is linear.
    pub obs: Option<Mat>,
}

impl SubjectGrad {
    pub fn zeros_like(model: &SubjectModel) -> Self {
        let flow = match &model.flow {
            FlowParams::ShPlrnn(p) => FlowParams::ShPlrnn(ShplrnnParams::zeros(p.latent(), p.hidden())),
            FlowParams::Vanilla(p) => FlowParams::Vanilla(VanillaRnnParams {
                w: Mat::zeros(p.w.rows(), p.w.cols()),
                b: vec![0.0; p.b.len()],
            }),
        };
        let obs = match &model.obs {
            Observation::Identity => None,
            Observation::Linear(b) => Some(Mat::zeros(b.rows(), b.cols())),
        };
        Self { flow, obs }
    }
}

/// Chain rule through [`materialize`]: accumulates group gradients into
/// `d_group` (same layout as `group.values()`) and feature gradients into `d_l`.
pub fn materialize_backward(
    group: &GroupParams,
    l: &SubjectFeature,
    grad: &SubjectGrad,
    d_group: &mut [f64],
    d_l: &mut [f64],
) {
    let spec = group.spec;
    let lv = l.as_slice();
    let range = |b: Block| group.info(b).expect("block present").range();
    let uses_outer = spec.scheme == Scheme::OuterProduct;
    let mut d_diag = vec![0.0; if uses_outer { spec.rank() } else { 0 }];
    let diag = if uses_outer { group.outer_diag(lv) } else { Vec::new() };

    match &grad.flow {
        FlowParams::ShPlrnn(g) => {
            project_backward(group.block(Block::PA), lv, &g.a, &mut d_group[range(Block::PA)], d_l);
            project_backward(group.block(Block::PH1), lv, &g.h1, &mut d_group[range(Block::PH1)], d_l);
            project_backward(group.block(Block::PH2), lv, &g.h2, &mut d_group[range(Block::PH2)], d_l);
            if uses_outer {
                for (u_b, q_b, dw) in [(Block::UW1, Block::QW1, &g.w1), (Block::UW2, Block::QW2, &g.w2)] {
                    let (ru, rq) = (range(u_b), range(q_b));
                    let mut du = vec![0.0; ru.len()];
                    let mut dq = vec![0.0; rq.len()];
                    outer_product_backward(group.block(u_b), &diag, group.block(q_b), dw, &mut du, &mut d_diag, &mut dq);
                    d_group[ru].iter_mut().zip(&du).for_each(|(a, b)| *a += b);
                    d_group[rq].iter_mut().zip(&dq).for_each(|(a, b)| *a += b);
                }
            } else {
                project_backward(group.block(Block::PW1), lv, g.w1.as_slice(), &mut d_group[range(Block::PW1)], d_l);
                project_backward(group.block(Block::PW2), lv, g.w2.as_slice(), &mut d_group[range(Block::PW2)], d_l);
            }
        }
        FlowParams::Vanilla(g) => {
            project_backward(group.block(Block::PB), lv, &g.b, &mut d_group[range(Block::PB)], d_l);
            if uses_outer {
                let (ru, rq) = (range(Block::UW), range(Block::QW));
                let mut du = vec![0.0; ru.len()];
                let mut dq = vec![0.0; rq.len()];
                outer_product_backward(group.block(Block::UW), &diag, group.block(Block::QW), &g.w, &mut du, &mut d_diag, &mut dq);
                d_group[ru].iter_mut().zip(&du).for_each(|(a, b)| *a += b);
                d_group[rq].iter_mut().zip(&dq).for_each(|(a, b)| *a += b);
            } else {
                project_backward(group.block(Block::PW), lv, g.w.as_slice(), &mut d_group[range(Block::PW)], d_l);
            }
        }
    }

    if uses_outer {
        if spec.uses_lift() {
            // a = R l
            let nf = spec.n_feat;
            let r = group.block(Block::Lift);
            let rl = range(Block::Lift);
            for (i, &da) in d_diag.iter().enumerate() {
                for f in 0..nf {
                    d_group[rl.start + i * nf + f] += da * lv[f];
                    d_l[f] += da * r[i * nf + f];
                }
            }
        } else {
            d_l.iter_mut().zip(&d_diag).for_each(|(a, b)| *a += b);
        }
    }

    if let Some(db) = &grad.obs {
        match spec.obs {
            ObsKind::SharedLinear => {
                d_group[range(Block::ObsB)]
                    .iter_mut()
                    .zip(db.as_slice())
                    .for_each(|(a, b)| *a += b);
            }
            ObsKind::SubjectLinear => {
                project_backward(group.block(Block::PObs), lv, db.as_slice(), &mut d_group[range(Block::PObs)], d_l);
            }
            ObsKind::Identity => {}
        }
    }
}

/// `A⊙z + W1·relu(W2·z + h2) + h1`
pub fn shplrnn_step(params: &ShplrnnParams, z: &[f64]) -> Vec<f64> {
    let mut hidden = vec![0.0; params.hidden()];
    let mut out = vec![0.0; params.latent()];
    shplrnn_step_into(params, z, &mut hidden, &mut out);
    out
}

/// [`shplrnn_step`] writing the ReLU outputs to `hidden` and the new state to `out`.
pub fn shplrnn_step_into(params: &ShplrnnParams, z: &[f64], hidden: &mut [f64], out: &mut [f64]) {
    params.w2.mul_vec_into(z, hidden);
    for (u, b) in hidden.iter_mut().zip(&params.h2) {
        *u = (*u + b).max(0.0);
    }
    params.w1.mul_vec_into(hidden, out);
    for ((o, a), (zi, h)) in out.iter_mut().zip(&params.a).zip(z.iter().zip(&params.h1)) {
        *o += a * zi + h;
    }
}

/// `tanh(W·z + b)`
pub fn vanilla_rnn_step(params: &VanillaRnnParams, z: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; params.b.len()];
    vanilla_rnn_step_into(params, z, &mut out);
    out
}

pub fn vanilla_rnn_step_into(params: &VanillaRnnParams, z: &[f64], out: &mut [f64]) {
    params.w.mul_vec_into(z, out);
    for (o, b) in out.iter_mut().zip(&params.b) {
        *o = tanh(*o + b);
    }
}

/// Applies the observation model to a latent state.
pub fn observe(z: &[f64], obs: &Observation) -> Result<Vec<f64>> {
    match obs {
        Observation::Identity => Ok(z.to_vec()),
        Observation::Linear(b) => {
            if b.cols() != z.len() {
                return Err(Error::Shape(format!(
                    "observation matrix has {} columns, state has {} entries",
                    b.cols(),
                    z.len()
                )));
            }
            Ok(b.mul_vec(z))
        }
    }
}

/// Observation under a declared kind, checking `M = N` for identity.
pub fn observe_checked(z: &[f64], obs: &Observation, n_obs: usize) -> Result<Vec<f64>> {
    if matches!(obs, Observation::Identity) && z.len() != n_obs {
        return Err(Error::Shape(format!(
            "identity observation with M = {} and N = {n_obs}",
            z.len()
        )));
    }
    observe(z, obs)
}

/// Free-running rollout: row `k` is `h(F^{k+1}(z0))`, no data injected.
/// The returned trajectory has unit sampling interval.
pub fn generate_trajectory(model: &SubjectModel, z0: &[f64], n_steps: usize) -> Result<Trajectory> {
    if n_steps == 0 {
        return Err(Error::InvalidArgument("n_steps must be at least 1".into()));
    }
    if z0.len() != model.flow.latent() {
        return Err(Error::Shape(format!(
            "initial state has {} entries, model latent size is {}",
            z0.len(),
            model.flow.latent()
        )));
    }
    if !z0.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite initial state".into()));
    }
    let mut z = z0.to_vec();
    let mut rows: Vec<f64> = Vec::new();
    let mut n_out = 0;
    for step in 0..n_steps {
        z = model.flow.step(&z);
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged { step: step + 1 });
        }
        let x = observe(&z, &model.obs)?;
        n_out = x.len();
        rows.extend_from_slice(&x);
    }
    Trajectory::new(Mat::from_vec(n_steps, n_out, rows)?, 1.0)
}
