//! Exact quadratic tasks `L_o(θ) = ½(θ − θ*_o)ᵀ H_o (θ − θ*_o)`.
//!
//! On these losses the second-order forgetting identities hold with no
//! remainder, so the simulator checks them to round-off.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forgetting::{self, CheckpointSet, ForgettingLedger, HessianView};
use crate::linalg::{self, DenseSymmetric};

/// Eigenvalues at or below this fraction of `λ_max` count as zero.
pub const NULL_THRESHOLD: f64 = 1e-10;

/// Largest dimension accepted for dense simulation.
pub const MAX_DIM: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadTask {
    pub optimum: Vec<f64>,
    pub hessian: DenseSymmetric,
}

impl QuadTask {
    pub fn new(optimum: Vec<f64>, hessian: DenseSymmetric) -> Result<Self> {
        if optimum.len() != hessian.dim() {
            return Err(Error::dim("quadratic task optimum", hessian.dim(), optimum.len()));
        }
        if hessian.dim() > MAX_DIM {
            return Err(Error::CapacityExceeded {
                params: hessian.dim(),
                cap: MAX_DIM,
            });
        }
        let ev = hessian.eigenvalues_desc();
        let (max, min) = (ev[0], *ev.last().unwrap());
        if min < -1e-12 * max.abs().max(f64::MIN_POSITIVE) {
            return Err(Error::NotPsd {
                min_eig: min,
                max_eig: max,
            });
        }
        Ok(Self { optimum, hessian })
    }

    pub fn dim(&self) -> usize {
        self.optimum.len()
    }
}

pub fn quad_loss(task: &QuadTask, theta: &[f64]) -> f64 {
    let e = linalg::sub(theta, &task.optimum);
    0.5 * task.hessian.quad_form(&e)
}

pub fn quad_grad(task: &QuadTask, theta: &[f64]) -> Vec<f64> {
    task.hessian.matvec(&linalg::sub(theta, &task.optimum))
}

/// `S†x` with eigenvalues below `1e-10·λ_max` dropped.
pub fn pseudoinverse_apply(s: &DenseSymmetric, x: &[f64]) -> Vec<f64> {
    linalg::pinv_apply(s, x, NULL_THRESHOLD)
}

/// `Σ H_o` over the given tasks (zero matrix when empty).
pub fn hessian_sum(tasks: &[QuadTask], dim: usize) -> DenseSymmetric {
    tasks.iter().fold(DenseSymmetric::zeros(dim), |acc, t| acc.add(&t.hessian))
}

/// Orthonormal basis of `null(S)`; all of `R^P` when `S = 0`.
pub fn null_basis(s: &DenseSymmetric) -> DMatrix<f64> {
    if s.matrix().amax() == 0.0 {
        return DMatrix::identity(s.dim(), s.dim());
    }
    linalg::null_space(s, NULL_THRESHOLD)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constrained {
    pub delta: Vec<f64>,
    /// The null space of the summed Hessian was empty.
    pub capacity_exhausted: bool,
}

/// Projects a proposed update onto `null(Σ H_o)`.
pub fn constrained_update(delta: &[f64], tasks_so_far: &[QuadTask]) -> Result<Constrained> {
    let p = delta.len();
    if let Some(t) = tasks_so_far.iter().find(|t| t.dim() != p) {
        return Err(Error::dim("constrained update", t.dim(), p));
    }
    let n = null_basis(&hessian_sum(tasks_so_far, p));
    if n.ncols() == 0 {
        return Ok(Constrained {
            delta: vec![0.0; p],
            capacity_exhausted: true,
        });
    }
    let coeff = n.transpose() * DMatrix::from_column_slice(p, 1, delta);
    Ok(Constrained {
        delta: (n * coeff).as_slice().to_vec(),
        capacity_exhausted: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Policy {
    Unconstrained,
    NullForgetting,
    /// Null-forgetting, except that task `inject_at` adds a seeded update
    /// of norm `violation_scale` inside the range of the earlier Hessians;
    /// task `inject_at + 1` then applies the corrective step.
    NmfCorrection {
        inject_at: usize,
        violation_scale: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum SolveMode {
    /// Exact minimization over the allowed subspace.
    ClosedForm,
    /// Projected gradient descent with a fixed step.
    GradientSteps { learning_rate: f64, steps: usize },
}

#[derive(Debug, Clone)]
pub struct QuadRun {
    pub checkpoints: CheckpointSet,
    pub ledger: ForgettingLedger,
    pub capacity_exhausted: Vec<bool>,
    /// `dim null(Σ_{o≤t} H_o)` for `t = 1..=T`.
    pub null_dims: Vec<usize>,
}

/// Minimizer of `L_t` over `θ + span(N)`, as a displacement.
fn subspace_step(task: &QuadTask, theta: &[f64], n: &DMatrix<f64>) -> Vec<f64> {
    let p = theta.len();
    if n.ncols() == 0 {
        return vec![0.0; p];
    }
    let e = DMatrix::from_column_slice(p, 1, &linalg::sub(theta, &task.optimum));
    let h = task.hessian.matrix();
    let hn = h * n;
    let reduced = DenseSymmetric::new(n.transpose() * &hn).expect("finite");
    let rhs = hn.transpose() * e;
    let a = linalg::pinv_apply(&reduced, rhs.as_slice(), NULL_THRESHOLD);
    let a = DMatrix::from_column_slice(a.len(), 1, &a);
    (n * a).as_slice().iter().map(|v| -v).collect()
}

fn gradient_steps(task: &QuadTask, theta: &[f64], n: &DMatrix<f64>, lr: f64, steps: usize) -> Vec<f64> {
    let mut cur = theta.to_vec();
    let nt = n.transpose();
    for _ in 0..steps {
        let g = DMatrix::from_column_slice(cur.len(), 1, &quad_grad(task, &cur));
        let pg = n * (&nt * g);
        for (c, v) in cur.iter_mut().zip(pg.iter()) {
            *c -= lr * v;
        }
    }
    linalg::sub(&cur, theta)
}

fn seeded_unit(p: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = linalg::norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

/// Trains the tasks in order from `theta0` under `policy`.
pub fn run_sequence(tasks: &[QuadTask], theta0: &[f64], policy: Policy, mode: SolveMode) -> Result<QuadRun> {
    let p = theta0.len();
    if let Some(t) = tasks.iter().find(|t| t.dim() != p) {
        return Err(Error::dim("quadratic task", p, t.dim()));
    }
    if let Policy::NmfCorrection { inject_at, .. } = policy {
        if inject_at < 2 || inject_at >= tasks.len() {
            return Err(Error::InvalidArgument(format!(
                "inject_at must be in 2..{}, got {inject_at}",
                tasks.len()
            )));
        }
    }
    let full = DMatrix::identity(p, p);
    let mut cs = CheckpointSet::new(theta0.to_vec());
    let mut exhausted = Vec::with_capacity(tasks.len());
    let mut null_dims = Vec::with_capacity(tasks.len());
    let mut theta = theta0.to_vec();
    let mut prev_delta = vec![0.0; p];
    for (i, task) in tasks.iter().enumerate() {
        let t = i + 1;
        let constrained = !matches!(policy, Policy::Unconstrained);
        let (n, flag) = if constrained && i > 0 {
            let n = null_basis(&hessian_sum(&tasks[..i], p));
            let empty = n.ncols() == 0;
            (n, empty)
        } else {
            (full.clone(), false)
        };
        let mut base = theta.clone();
        let mut correction = vec![0.0; p];
        if let Policy::NmfCorrection { inject_at, .. } = policy {
            if t == inject_at + 1 {
                let s = hessian_sum(&tasks[..inject_at], p);
                let b = hessian_sum(&tasks[..inject_at - 1], p);
                let bd = b.matvec(&prev_delta);
                correction = pseudoinverse_apply(&s, &bd).iter().map(|v| -v).collect();
                linalg::axpy(1.0, &correction, &mut base);
            }
        }
        let mut delta = match mode {
            SolveMode::ClosedForm => subspace_step(task, &base, &n),
            SolveMode::GradientSteps { learning_rate, steps } => gradient_steps(task, &base, &n, learning_rate, steps),
        };
        if let Policy::NmfCorrection {
            inject_at,
            violation_scale,
            seed,
        } = policy
        {
            if t == inject_at {
                let b = hessian_sum(&tasks[..inject_at - 1], p);
                let mut r = b.matvec(&seeded_unit(p, seed));
                let rn = linalg::norm(&r);
                for x in &mut r {
                    *x *= violation_scale / rn;
                }
                linalg::axpy(1.0, &r, &mut delta);
            }
        }
        linalg::axpy(1.0, &correction, &mut delta);
        linalg::axpy(1.0, &delta, &mut theta);
        prev_delta = delta;
        let grad = quad_grad(task, &theta);
        cs.push(theta.clone(), Some(grad), Some(task.hessian.clone()))?;
        exhausted.push(flag);
        null_dims.push(null_basis(&hessian_sum(&tasks[..=i], p)).ncols());
    }
    let mut ledger = ForgettingLedger::new(tasks.len());
    for j in 1..=tasks.len() {
        for o in 1..=j {
            ledger.record_loss(j, o, quad_loss(&tasks[o - 1], cs.theta(j)?))?;
        }
    }
    Ok(QuadRun {
        checkpoints: cs,
        ledger,
        capacity_exhausted: exhausted,
        null_dims,
    })
}

/// Random orthonormal `p × p` matrix.
pub fn random_orthonormal(p: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::<f64>::from_fn(p, p, |_, _| StandardNormal.sample(&mut rng));
    g.qr().q()
}

/// `Σ λ_i q_i q_iᵀ` over the given columns of `q`.
pub fn hessian_on(q: &DMatrix<f64>, cols: std::ops::Range<usize>, eigs: &[f64]) -> DenseSymmetric {
    let p = q.nrows();
    let mut m = DMatrix::zeros(p, p);
    for (c, &l) in cols.zip(eigs) {
        let v = q.column(c);
        m += v * v.transpose() * l;
    }
    DenseSymmetric::new(m).expect("finite")
}

fn random_eigs(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    (0..k).map(|_| rng.random_range(0.5..2.0)).collect()
}

fn random_optimum(rng: &mut ChaCha8Rng, p: usize) -> Vec<f64> {
    (0..p).map(|_| StandardNormal.sample(rng)).collect()
}

/// Tasks with mutually orthogonal Hessian ranges of the given ranks.
pub fn orthogonal_tasks(p: usize, ranks: &[usize], seed: u64) -> Result<Vec<QuadTask>> {
    if ranks.iter().sum::<usize>() > p {
        return Err(Error::InvalidArgument(format!("ranks {ranks:?} exceed dimension {p}")));
    }
    let q = random_orthonormal(p, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let mut start = 0;
    ranks
        .iter()
        .map(|&k| {
            let h = hessian_on(&q, start..start + k, &random_eigs(&mut rng, k));
            start += k;
            QuadTask::new(random_optimum(&mut rng, p), h)
        })
        .collect()
}

/// A task whose Hessian is `G Gᵀ / k` for a Gaussian `p × k` matrix `G`.
pub fn random_task(p: usize, k: usize, seed: u64) -> Result<QuadTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::<f64>::from_fn(p, k, |_, _| StandardNormal.sample(&mut rng));
    let h = DenseSymmetric::new(&g * g.transpose() / k as f64)?;
    QuadTask::new(random_optimum(&mut rng, p), h)
}

/// Default theorem-suite scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadScenario {
    pub dim: usize,
    pub tasks: usize,
    pub rank_per_task: usize,
    pub seed: u64,
    pub inject_at: usize,
    pub violation_scale: f64,
    /// Step size and count for the gradient-step variant of the
    /// null-forgetting check.
    pub gd_learning_rate: f64,
    pub gd_steps: usize,
}

impl Default for QuadScenario {
    fn default() -> Self {
        Self {
            dim: 50,
            tasks: 5,
            rank_per_task: 5,
            seed: 7,
            inject_at: 3,
            violation_scale: 1.0,
            gd_learning_rate: 0.05,
            gd_steps: 200,
        }
    }
}

impl QuadScenario {
    /// Hex sha256 of the scenario's JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("scenario serializes")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    /// `|value| < threshold`
    Below,
    /// `value > threshold`
    Above,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub bound: Bound,
    pub threshold: f64,
    pub passed: bool,
}

fn check(name: &str, value: f64, threshold: f64) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        value,
        bound: Bound::Below,
        threshold,
        passed: value.is_finite() && value.abs() < threshold,
    }
}

fn check_above(name: &str, value: f64, threshold: f64) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        value,
        bound: Bound::Above,
        threshold,
        passed: value.is_finite() && value > threshold,
    }
}

fn max_abs_forgetting(run: &QuadRun) -> Result<f64> {
    let mut worst = 0.0_f64;
    for t in 2..=run.ledger.tasks() {
        for o in 1..t {
            worst = worst.max(run.ledger.forgetting(o, t)?.abs());
        }
    }
    Ok(worst)
}

/// Machine-precision checks of the forgetting identities.
pub fn theorem_suite(sc: &QuadScenario) -> Result<Vec<CheckResult>> {
    if sc.tasks < 4 || sc.inject_at < 2 || sc.inject_at + 1 >= sc.tasks {
        return Err(Error::InvalidConfig(format!(
            "scenario needs tasks ≥ 4 and 2 ≤ inject_at < tasks − 1 (tasks = {}, inject_at = {})",
            sc.tasks, sc.inject_at
        )));
    }
    if sc.rank_per_task * sc.tasks > sc.dim {
        return Err(Error::InvalidConfig(format!(
            "rank_per_task · tasks = {} exceeds dim = {}",
            sc.rank_per_task * sc.tasks,
            sc.dim
        )));
    }
    let p = sc.dim;
    let k = sc.rank_per_task;
    let theta0 = vec![0.0; p];
    let mut out = Vec::new();

    // Null-forgetting on arbitrary overlapping tasks.
    let overlapping: Vec<QuadTask> = (0..sc.tasks)
        .map(|i| random_task(p, k, sc.seed.wrapping_add(100 + i as u64)))
        .collect::<Result<_>>()?;
    let nf = run_sequence(&overlapping, &theta0, Policy::NullForgetting, SolveMode::ClosedForm)?;
    out.push(check("null_forgetting_closed_form_max_abs_E", max_abs_forgetting(&nf)?, 1e-10));
    let gd = run_sequence(
        &overlapping,
        &theta0,
        Policy::NullForgetting,
        SolveMode::GradientSteps {
            learning_rate: sc.gd_learning_rate,
            steps: sc.gd_steps,
        },
    )?;
    out.push(check("null_forgetting_gradient_steps_max_abs_E", max_abs_forgetting(&gd)?, 1e-10));
    let mono = nf.null_dims.windows(2).filter(|w| w[1] > w[0]).count();
    out.push(check("null_space_dim_increases", mono as f64, 1.0));

    let tasks = unconstrained_scenario(sc)?;
    let un = run_sequence(&tasks, &theta0, Policy::Unconstrained, SolveMode::ClosedForm)?;
    let t = sc.tasks;
    let th = forgetting::theorem1_check(&un.checkpoints, &un.ledger, t, forgetting::THEOREM1_THRESHOLD)?;
    out.push(check("theorem1_gap", th.gap, 1e-10));
    out.push(check("theorem1_prior_forgetting", max_abs_prior(&un.ledger, t)?, 1e-10));
    out.push(check_above("theorem1_measured_E", th.measured, 1e-6));
    let rec = forgetting::recursive_avg_forgetting(&un.checkpoints, HessianView::Exact, t)?;
    out.push(check("recursive_estimate_error", rec - un.ledger.avg_forgetting(t)?, 1e-10));

    // Non-monotonic correction.
    let tau = sc.inject_at;
    let nmf_tasks = nmf_scenario(p, k, sc.tasks, tau, sc.seed)?;
    let nmf = run_sequence(
        &nmf_tasks,
        &theta0,
        Policy::NmfCorrection {
            inject_at: tau,
            violation_scale: sc.violation_scale,
            seed: sc.seed,
        },
        SolveMode::ClosedForm,
    )?;
    let e_tau = nmf.ledger.avg_forgetting(tau)?;
    out.push(check_above("nmf_injected_E", e_tau, 1e-6));
    out.push(check("nmf_corrected_E", nmf.ledger.avg_forgetting(tau + 1)?, 1e-10));
    let mut after = 0.0_f64;
    for s in tau + 2..=sc.tasks {
        let c = forgetting::theorem1_check(&nmf.checkpoints, &nmf.ledger, s, forgetting::THEOREM1_THRESHOLD)?;
        after = after.max(c.gap);
    }
    out.push(check("nmf_theorem1_gap_after_correction", after, 1e-10));
    Ok(out)
}

/// Orthogonal-range tasks followed by one random overlapping task.
pub fn unconstrained_scenario(sc: &QuadScenario) -> Result<Vec<QuadTask>> {
    let mut tasks = orthogonal_tasks(sc.dim, &vec![sc.rank_per_task; sc.tasks - 1], sc.seed)?;
    tasks.push(random_task(sc.dim, sc.rank_per_task, sc.seed.wrapping_add(999))?);
    Ok(tasks)
}

fn max_abs_prior(ledger: &ForgettingLedger, t: usize) -> Result<f64> {
    let mut m = 0.0_f64;
    for s in 1..t {
        m = m.max(ledger.avg_forgetting(s)?.abs());
    }
    Ok(m)
}

/// Tasks for the correction check: random overlapping tasks before
/// `tau`, task `tau` with a Hessian range orthogonal to all of them, and
/// random tasks after.
pub fn nmf_scenario(p: usize, k: usize, n_tasks: usize, tau: usize, seed: u64) -> Result<Vec<QuadTask>> {
    let mut tasks: Vec<QuadTask> = (1..tau)
        .map(|i| random_task(p, k, seed.wrapping_add(300 + i as u64)))
        .collect::<Result<_>>()?;
    let b = hessian_sum(&tasks, p);
    let n = null_basis(&b);
    if n.ncols() < k {
        return Err(Error::InvalidConfig("not enough free directions for the orthogonal task".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0123);
    let g = DMatrix::<f64>::from_fn(n.ncols(), k, |_, _| StandardNormal.sample(&mut rng));
    let f = &n * g;
    let h = DenseSymmetric::new(&f * f.transpose() / k as f64)?;
    tasks.push(QuadTask::new(random_optimum(&mut rng, p), h)?);
    for i in tau + 1..=n_tasks {
        tasks.push(random_task(p, k, seed.wrapping_add(300 + i as u64))?);
    }
    Ok(tasks)
}
