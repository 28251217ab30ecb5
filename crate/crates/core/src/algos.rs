//! Continual-learning training loops and the memories behind them.
//!
//! Plain SGD takes an optional [`GradientHook`] that rewrites every batch
//! gradient before the step. The hooks provided here implement the
//! parameter-isolation family: projection against a flat orthonormal
//! memory (SGD† and OGD), per-layer activation projection (GPM) and
//! binary gradient masks.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hessian::{self, energy_cutoff_k};
use crate::linalg::{self, EigenPairs, OrthoBasis};
use crate::mlp::{self, Dataset, Layout, MlpSpec, ParamVector};

/// Residual norm below which a memory candidate counts as already spanned.
pub const DROP_TOL: f64 = 1e-8;

/// Loss above which training is aborted as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    /// Epochs (0-based) at which the rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub lr_schedule: Option<StepDecay>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("learning_rate must be finite and non-negative, got {}", self.learning_rate));
        }
        if self.epochs == 0 {
            problems.push("epochs must be positive".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        if let Some(s) = &self.lr_schedule {
            if s.milestones.windows(2).any(|w| w[0] >= w[1]) {
                problems.push("lr_schedule milestones must be strictly increasing".to_string());
            }
            if !(s.gamma > 0.0 && s.gamma.is_finite()) {
                problems.push(format!("lr_schedule gamma must be positive, got {}", s.gamma));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        match &self.lr_schedule {
            None => self.learning_rate,
            Some(s) => {
                let k = s.milestones.iter().filter(|&&m| m <= epoch).count();
                self.learning_rate * s.gamma.powi(k as i32)
            }
        }
    }
}

/// Rewrites a batch gradient in place before the SGD step.
pub trait GradientHook {
    fn apply(&self, grad: &mut [f64]);
}

impl<F: Fn(&mut [f64])> GradientHook for F {
    fn apply(&self, grad: &mut [f64]) {
        self(grad)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamVector,
    /// Every applied update `δ = −η·g̃`, in order, when recording was asked for.
    pub trace: Option<Vec<Vec<f64>>>,
    pub steps: usize,
}

/// Shuffled mini-batch SGD. Epoch `e` shuffles with a generator seeded
/// from `(cfg.seed, e)`.
pub fn train_sgd(
    spec: &MlpSpec,
    params: &ParamVector,
    data: &Dataset,
    cfg: &TrainConfig,
    hook: Option<&dyn GradientHook>,
    record_trace: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    mlp::mean_loss(spec, params, data)?;
    let mut theta = params.values().to_vec();
    let mut trace = record_trace.then(Vec::new);
    let n = data.len();
    let d = data.dim();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let lr = cfg.lr_at_epoch(epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let mut flat = Vec::with_capacity(d * chunk.len());
            for &i in chunk {
                flat.extend_from_slice(data.sample(i));
            }
            let x = DMatrix::from_vec(d, chunk.len(), flat);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels()[i]).collect();
            let (loss, mut g) = mlp::loss_grad_batch(spec, &theta, &x, &labels);
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                return Err(Error::Diverged { step, loss });
            }
            if let Some(h) = hook {
                h.apply(&mut g);
            }
            for (t, gi) in theta.iter_mut().zip(&g) {
                *t -= lr * gi;
            }
            if let Some(tr) = trace.as_mut() {
                tr.push(g.iter().map(|gi| -lr * gi).collect());
            }
            step += 1;
        }
    }
    Ok(TrainOutcome {
        params: params.with_values(theta)?,
        trace,
        steps: step,
    })
}

/// Orthonormal basis `M` of protected directions in parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMemory {
    basis: OrthoBasis,
    cap: usize,
    /// Set when an update had to discard candidates to respect `cap`.
    pub truncated: bool,
}

impl ProjectionMemory {
    pub fn new(p: usize, cap: usize) -> Self {
        Self {
            basis: OrthoBasis::empty(p),
            cap,
            truncated: false,
        }
    }

    pub fn from_basis(basis: OrthoBasis, cap: usize) -> Result<Self> {
        if basis.rank() > cap {
            return Err(Error::InvalidArgument(format!("basis rank {} exceeds cap {cap}", basis.rank())));
        }
        Ok(Self {
            basis,
            cap,
            truncated: false,
        })
    }

    pub fn basis(&self) -> &OrthoBasis {
        &self.basis
    }

    pub fn rank(&self) -> usize {
        self.basis.rank()
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    /// Gram–Schmidt appends candidates in order until the cap is reached.
    /// Returns how many were added.
    pub fn extend<'v>(&mut self, candidates: impl IntoIterator<Item = &'v [f64]>) -> usize {
        let mut added = 0;
        for c in candidates {
            if self.rank() >= self.cap {
                let mut r = c.to_vec();
                self.basis.remove_component(&mut r);
                if linalg::norm(&r) >= DROP_TOL * linalg::norm(c) {
                    self.truncated = true;
                }
                continue;
            }
            if self.basis.try_push(c, DROP_TOL) {
                added += 1;
            }
        }
        added
    }

    /// `max |Mᵀ v|`
    pub fn violation(&self, v: &[f64]) -> f64 {
        linalg::max_abs(&self.basis.coefficients(v))
    }
}

impl GradientHook for ProjectionMemory {
    fn apply(&self, grad: &mut [f64]) {
        self.basis.remove_component(grad);
    }
}

/// `g − M Mᵀ g`
pub fn project_out(g: &ParamVector, mem: &ProjectionMemory) -> ParamVector {
    let mut v = g.values().to_vec();
    mem.basis.remove_component(&mut v);
    g.with_values(v).expect("same length")
}

/// How many Hessian eigenvectors SGD† keeps per task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EigenSelection {
    /// Leading `(1 − ε)` fraction of spectral energy.
    Energy(f64),
    Fixed(usize),
}

/// Appends the top Hessian eigenvectors of the finished task to `mem`.
/// `spectrum` may carry a precomputed decomposition of the task Hessian
/// at `params_t`; otherwise the dense Hessian is built and decomposed.
pub fn sgd_dagger_after_task(
    spec: &MlpSpec,
    params_t: &ParamVector,
    data_t: &Dataset,
    mem: &ProjectionMemory,
    selection: EigenSelection,
    spectrum: Option<&EigenPairs>,
) -> Result<ProjectionMemory> {
    let owned;
    let eig = match spectrum {
        Some(e) => e,
        None => {
            owned = hessian::exact_hessian(spec, params_t, data_t)?.eigen();
            &owned
        }
    };
    if eig.vectors.nrows() != mem.basis.dim() {
        return Err(Error::dim("eigenvector length", mem.basis.dim(), eig.vectors.nrows()));
    }
    let k = match selection {
        EigenSelection::Energy(eps) => {
            if !(0.0..=1.0).contains(&eps) {
                return Err(Error::InvalidArgument(format!("energy fraction {eps} outside [0, 1]")));
            }
            energy_cutoff_k(&eig.values, eps)
        }
        EigenSelection::Fixed(k) => k.min(eig.len()),
    };
    let mut out = mem.clone();
    let cols: Vec<Vec<f64>> = (0..k).map(|i| eig.vector(i)).collect();
    out.extend(cols.iter().map(|c| c.as_slice()));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OgdVariant {
    All,
    Gtl,
}

/// Seeded subset of `min(cap, n)` sample indices, sorted.
pub fn sample_subset(n: usize, cap: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if cap < n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        idx.truncate(cap);
        idx.sort_unstable();
    }
    idx
}

/// Output gradients of a seeded sample subset, in the order they are
/// offered to the memory.
pub fn ogd_candidates(
    spec: &MlpSpec,
    params_t: &ParamVector,
    data_t: &Dataset,
    variant: OgdVariant,
    sample_cap: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for i in sample_subset(data_t.len(), sample_cap, seed) {
        let j = mlp::output_jacobian(spec, params_t, data_t.sample(i))?;
        match variant {
            OgdVariant::Gtl => out.push(j.column(data_t.labels()[i]).iter().copied().collect()),
            OgdVariant::All => {
                for c in 0..j.ncols() {
                    out.push(j.column(c).iter().copied().collect());
                }
            }
        }
    }
    Ok(out)
}

pub fn ogd_after_task(
    spec: &MlpSpec,
    params_t: &ParamVector,
    data_t: &Dataset,
    mem: &ProjectionMemory,
    variant: OgdVariant,
    sample_cap: usize,
    seed: u64,
) -> Result<ProjectionMemory> {
    let cands = ogd_candidates(spec, params_t, data_t, variant, sample_cap, seed)?;
    let mut out = mem.clone();
    out.extend(cands.iter().map(|c| c.as_slice()));
    Ok(out)
}

/// Per-layer orthonormal bases of stored input activations.
#[derive(Debug, Clone, PartialEq)]
pub struct GpmMemory {
    pub bases: Vec<OrthoBasis>,
    /// Layers whose basis already spans the full input space.
    pub saturated: Vec<bool>,
}

impl GpmMemory {
    pub fn new(spec: &MlpSpec) -> Self {
        let bases: Vec<OrthoBasis> = spec.layer_widths[..spec.n_layers()].iter().map(|&w| OrthoBasis::empty(w)).collect();
        let saturated = vec![false; bases.len()];
        Self { bases, saturated }
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.bases.iter().map(|b| b.rank()).collect()
    }

    /// Hook view for flat gradients with the given layout.
    pub fn hook<'a>(&'a self, layout: &'a Layout) -> GpmHook<'a> {
        GpmHook { mem: self, layout }
    }

    /// `max_l |ΔW^lᵀ B_l|` for a flat update.
    pub fn violation(&self, layout: &Layout, delta: &[f64]) -> f64 {
        let mut worst = 0.0_f64;
        for (b, basis) in layout.blocks.iter().zip(&self.bases) {
            if basis.rank() == 0 {
                continue;
            }
            let dwt = mlp::view_wt(delta, b);
            worst = worst.max((dwt * basis.matrix()).amax());
        }
        worst
    }
}

pub struct GpmHook<'a> {
    mem: &'a GpmMemory,
    layout: &'a Layout,
}

impl GradientHook for GpmHook<'_> {
    fn apply(&self, grad: &mut [f64]) {
        for (b, basis) in self.layout.blocks.iter().zip(&self.mem.bases) {
            if basis.rank() == 0 {
                continue;
            }
            let r = b.weight_range();
            let gt = DMatrix::from_column_slice(b.fan_out, b.fan_in, &grad[r.clone()]);
            let bm = basis.matrix();
            let proj = &gt - (&gt * bm) * bm.transpose();
            grad[r].copy_from_slice(proj.as_slice());
        }
    }
}

/// `G_l ← (I − B_l B_lᵀ) G_l` for gradients given as `fan_in × fan_out`.
pub fn gpm_project(grad_by_layer: &[DMatrix<f64>], mem: &GpmMemory) -> Result<Vec<DMatrix<f64>>> {
    if grad_by_layer.len() != mem.bases.len() {
        return Err(Error::dim("gpm layer count", mem.bases.len(), grad_by_layer.len()));
    }
    grad_by_layer
        .iter()
        .zip(&mem.bases)
        .enumerate()
        .map(|(l, (g, b))| {
            if g.nrows() != b.dim() {
                return Err(Error::dim(format!("gpm layer {l} rows"), b.dim(), g.nrows()));
            }
            if b.rank() == 0 {
                return Ok(g.clone());
            }
            let m = b.matrix();
            Ok(g - m * (m.transpose() * g))
        })
        .collect()
}

/// Grows each layer basis with the residual activation subspace of the
/// finished task. Singular values below `1e-10 · ‖X_l‖_F` are treated as
/// zero before the `(1 − ε)` energy cut.
pub fn gpm_after_task(
    spec: &MlpSpec,
    params_t: &ParamVector,
    data_t: &Dataset,
    mem: &GpmMemory,
    epsilon: f64,
    sample_cap: usize,
    seed: u64,
) -> Result<GpmMemory> {
    if spec.use_bias {
        return Err(Error::IncompatibleNetwork {
            algorithm: "gpm",
            reason: "bias vectors are not supported".into(),
        });
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!("energy fraction {epsilon} outside [0, 1]")));
    }
    if mem.bases.len() != spec.n_layers() {
        return Err(Error::dim("gpm layer count", spec.n_layers(), mem.bases.len()));
    }
    let subset = data_t.subset(&sample_subset(data_t.len(), sample_cap, seed))?;
    let acts = mlp::layer_inputs(spec, params_t, &subset)?;
    let mut out = mem.clone();
    for (l, x) in acts.iter().enumerate() {
        let basis = &mut out.bases[l];
        if basis.rank() >= basis.dim() {
            out.saturated[l] = true;
            continue;
        }
        let scale = x.norm();
        if scale == 0.0 {
            continue;
        }
        let resid = if basis.rank() == 0 {
            x.clone()
        } else {
            let m = basis.matrix();
            x - m * (m.transpose() * x)
        };
        let svd = resid.svd(true, false);
        let u = svd.u.expect("left singular vectors requested");
        let mut pairs: Vec<(f64, usize)> = svd
            .singular_values
            .iter()
            .copied()
            .enumerate()
            .filter(|(_, s)| *s > 1e-10 * scale)
            .map(|(i, s)| (s, i))
            .collect();
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
        let sv: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let k = energy_cutoff_k(&sv, epsilon);
        for &(_, i) in pairs.iter().take(k) {
            let col: Vec<f64> = u.column(i).iter().copied().collect();
            basis.try_push(&col, DROP_TOL);
            if basis.rank() >= basis.dim() {
                out.saturated[l] = true;
                break;
            }
        }
    }
    Ok(out)
}

/// Disjoint per-task index sets and the mask of the current task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskMask {
    pub task: usize,
    /// `index_sets[o-1]` is `I_o`.
    pub index_sets: Vec<Vec<usize>>,
    /// `m_t`: 0 on `I_{<t}`, 1 elsewhere.
    pub mask: Vec<f64>,
}

/// Task `o` owns positions `[(o−1)·s, o·s)` of a seeded permutation of
/// `0..P`, with `s = ⌊fraction·P⌋`.
pub fn mask_freeze_allocate(p: usize, t: usize, fraction_per_task: f64, seed: u64) -> Result<TaskMask> {
    if t == 0 {
        return Err(Error::InvalidArgument("tasks are numbered from 1".into()));
    }
    if !(fraction_per_task > 0.0 && fraction_per_task <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction per task {fraction_per_task} outside (0, 1]")));
    }
    let s = (fraction_per_task * p as f64).floor() as usize;
    if t * s > p {
        return Err(Error::AllocationExhausted {
            task: t,
            requested: s,
            remaining: p.saturating_sub((t - 1) * s),
        });
    }
    let mut perm: Vec<usize> = (0..p).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let index_sets: Vec<Vec<usize>> = (0..t)
        .map(|o| {
            let mut v = perm[o * s..(o + 1) * s].to_vec();
            v.sort_unstable();
            v
        })
        .collect();
    let mut mask = vec![1.0; p];
    for set in &index_sets[..t - 1] {
        for &i in set {
            mask[i] = 0.0;
        }
    }
    Ok(TaskMask {
        task: t,
        index_sets,
        mask,
    })
}

pub fn mask_apply(g: &ParamVector, mask: &TaskMask) -> Result<ParamVector> {
    if g.len() != mask.mask.len() {
        return Err(Error::dim("mask length", mask.mask.len(), g.len()));
    }
    g.with_values(g.values().iter().zip(&mask.mask).map(|(a, m)| a * m).collect())
}

impl GradientHook for TaskMask {
    fn apply(&self, grad: &mut [f64]) {
        for (g, m) in grad.iter_mut().zip(&self.mask) {
            *g *= m;
        }
    }
}
