//! Forgetting bookkeeping and its second-order approximations.
//!
//! Tasks and checkpoints are numbered from 1; checkpoint `t` is the
//! parameter vector after training task `t`, checkpoint 0 the
//! initialization.

use crate::error::{Error, Result};
use crate::linalg::{self, DenseSymmetric, EigenPairs};

/// Loss and accuracy of every seen task at every later checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgettingLedger {
    tasks: usize,
    loss: Vec<Option<f64>>,
    acc: Vec<Option<f64>>,
}

impl ForgettingLedger {
    pub fn new(tasks: usize) -> Self {
        Self {
            tasks,
            loss: vec![None; tasks * tasks],
            acc: vec![None; tasks * tasks],
        }
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    fn slot(&self, j: usize, i: usize) -> Result<usize> {
        if i == 0 || i > j || j > self.tasks {
            return Err(Error::MissingEntry { checkpoint: j, task: i });
        }
        Ok((j - 1) * self.tasks + (i - 1))
    }

    /// Records `L_i(θ_j)` and `a_{j,i}` for `j ≥ i`.
    pub fn record(&mut self, j: usize, i: usize, loss: f64, acc: f64) -> Result<()> {
        let s = self.slot(j, i)?;
        if !loss.is_finite() || !acc.is_finite() {
            return Err(Error::NonFinite(format!("ledger entry ({j}, {i})")));
        }
        self.loss[s] = Some(loss);
        self.acc[s] = Some(acc);
        Ok(())
    }

    /// Records `L_i(θ_j)` only, for tasks without an accuracy.
    pub fn record_loss(&mut self, j: usize, i: usize, loss: f64) -> Result<()> {
        let s = self.slot(j, i)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("ledger entry ({j}, {i})")));
        }
        self.loss[s] = Some(loss);
        Ok(())
    }

    pub fn loss(&self, j: usize, i: usize) -> Result<f64> {
        self.loss[self.slot(j, i)?].ok_or(Error::MissingEntry { checkpoint: j, task: i })
    }

    pub fn acc(&self, j: usize, i: usize) -> Result<f64> {
        self.acc[self.slot(j, i)?].ok_or(Error::MissingEntry { checkpoint: j, task: i })
    }

    /// `L*_i = L_i(θ_i)`
    pub fn optimum_loss(&self, i: usize) -> Result<f64> {
        self.loss(i, i)
    }

    /// `E_o(t) = L_o(θ_t) − L*_o`
    pub fn forgetting(&self, o: usize, t: usize) -> Result<f64> {
        Ok(self.loss(t, o)? - self.loss(o, o)?)
    }

    /// `E(t) = (1/t) Σ_{o=1}^{t} E_o(t)`
    pub fn avg_forgetting(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Err(Error::MissingEntry { checkpoint: 0, task: 0 });
        }
        let mut s = 0.0;
        for o in 1..=t {
            s += self.forgetting(o, t)?;
        }
        Ok(s / t as f64)
    }

    /// `a_{o,o} − a_{t,o}`
    pub fn accuracy_forgetting(&self, o: usize, t: usize) -> Result<f64> {
        Ok(self.acc(o, o)? - self.acc(t, o)?)
    }

    /// Mean accuracy forgetting over tasks `1..=t`.
    pub fn avg_accuracy_forgetting(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Err(Error::MissingEntry { checkpoint: 0, task: 0 });
        }
        let mut s = 0.0;
        for o in 1..=t {
            s += self.accuracy_forgetting(o, t)?;
        }
        Ok(s / t as f64)
    }

    /// `BWT = 1/(T−1) Σ_{o<T} (a_{o,o} − a_{T,o})`
    pub fn bwt(&self) -> Result<f64> {
        let t = self.tasks;
        if t < 2 {
            return Err(Error::InvalidArgument("backward transfer needs at least two tasks".into()));
        }
        let mut s = 0.0;
        for o in 1..t {
            s += self.accuracy_forgetting(o, t)?;
        }
        Ok(s / (t - 1) as f64)
    }
}

/// Which curvature a quadratic estimate uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HessianView {
    Exact,
    /// `V_r Λ_r V_rᵀ` from the leading `r` eigenpairs. Needs
    /// [`CheckpointSet::ensure_spectra`].
    Rank(usize),
}

/// Parameter trajectory plus per-task curvature at the task optima.
#[derive(Debug, Clone)]
pub struct CheckpointSet {
    /// `θ_0 .. θ_T`
    pub thetas: Vec<Vec<f64>>,
    /// `∇L_o(θ_o)`, index `o − 1`.
    pub grads: Vec<Option<Vec<f64>>>,
    /// `H*_o`, index `o − 1`.
    pub hessians: Vec<Option<DenseSymmetric>>,
    /// Eigendecompositions of `H*_o`, filled by [`CheckpointSet::ensure_spectra`].
    pub spectra: Vec<Option<EigenPairs>>,
}

impl CheckpointSet {
    pub fn new(theta0: Vec<f64>) -> Self {
        Self {
            thetas: vec![theta0],
            grads: Vec::new(),
            hessians: Vec::new(),
            spectra: Vec::new(),
        }
    }

    /// Appends `θ_t` with its optional gradient and Hessian.
    pub fn push(&mut self, theta: Vec<f64>, grad: Option<Vec<f64>>, hessian: Option<DenseSymmetric>) -> Result<()> {
        let p = self.dim();
        if theta.len() != p {
            return Err(Error::dim("checkpoint length", p, theta.len()));
        }
        if let Some(g) = &grad {
            if g.len() != p {
                return Err(Error::dim("gradient length", p, g.len()));
            }
        }
        if let Some(h) = &hessian {
            if h.dim() != p {
                return Err(Error::dim("Hessian dimension", p, h.dim()));
            }
        }
        self.thetas.push(theta);
        self.grads.push(grad);
        self.hessians.push(hessian);
        self.spectra.push(None);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.thetas[0].len()
    }

    /// Number of tasks `T`.
    pub fn tasks(&self) -> usize {
        self.thetas.len() - 1
    }

    pub fn theta(&self, t: usize) -> Result<&[f64]> {
        self.thetas
            .get(t)
            .map(|v| v.as_slice())
            .ok_or(Error::MissingEntry { checkpoint: t, task: t })
    }

    /// `Δ_t = θ_t − θ_{t−1}`
    pub fn delta(&self, t: usize) -> Result<Vec<f64>> {
        if t == 0 {
            return Err(Error::InvalidArgument("Δ_0 is undefined".into()));
        }
        Ok(linalg::sub(self.theta(t)?, self.theta(t - 1)?))
    }

    pub fn hessian(&self, o: usize) -> Result<&DenseSymmetric> {
        o.checked_sub(1)
            .and_then(|i| self.hessians.get(i))
            .and_then(|h| h.as_ref())
            .ok_or(Error::MissingHessian(o))
    }

    pub fn ensure_spectra(&mut self) {
        for (h, s) in self.hessians.iter().zip(self.spectra.iter_mut()) {
            if let (Some(h), None) = (h, s.as_ref()) {
                *s = Some(h.eigen());
            }
        }
    }

    /// `vᵀ H_o v` under the chosen view.
    fn quad(&self, view: HessianView, o: usize, v: &[f64]) -> Result<f64> {
        match view {
            HessianView::Exact => Ok(self.hessian(o)?.quad_form(v)),
            HessianView::Rank(r) => {
                let eig = self.spectrum(o)?;
                let r = r.min(eig.len());
                let mut s = 0.0;
                for i in 0..r {
                    let c: f64 = eig.vectors.column(i).iter().zip(v).map(|(a, b)| a * b).sum();
                    s += eig.values[i] * c * c;
                }
                Ok(s)
            }
        }
    }

    /// `uᵀ H_o v` under the chosen view.
    fn bilinear(&self, view: HessianView, o: usize, u: &[f64], v: &[f64]) -> Result<f64> {
        match view {
            HessianView::Exact => Ok(linalg::dot(u, &self.hessian(o)?.matvec(v))),
            HessianView::Rank(r) => {
                let eig = self.spectrum(o)?;
                let r = r.min(eig.len());
                let mut s = 0.0;
                for i in 0..r {
                    let col = eig.vectors.column(i);
                    let cu: f64 = col.iter().zip(u).map(|(a, b)| a * b).sum();
                    let cv: f64 = col.iter().zip(v).map(|(a, b)| a * b).sum();
                    s += eig.values[i] * cu * cv;
                }
                Ok(s)
            }
        }
    }

    fn spectrum(&self, o: usize) -> Result<&EigenPairs> {
        self.hessian(o)?;
        self.spectra[o - 1]
            .as_ref()
            .ok_or_else(|| Error::Undefined(format!("spectrum of H_{o} not computed; call ensure_spectra first")))
    }

    /// `vᵀ H_o⁺ v` with `H⁺` the PSD-clipped Hessian; unchanged when
    /// `H_o` is already PSD.
    fn clipped_quad(&self, o: usize, v: &[f64]) -> Result<f64> {
        let h = self.hessian(o)?;
        if let Ok(eig) = self.spectrum(o) {
            if eig.values.iter().all(|&l| l >= 0.0) {
                return Ok(h.quad_form(v));
            }
            let mut s = 0.0;
            for (i, &l) in eig.values.iter().enumerate() {
                if l > 0.0 {
                    let c: f64 = eig.vectors.column(i).iter().zip(v).map(|(a, b)| a * b).sum();
                    s += l * c * c;
                }
            }
            return Ok(s);
        }
        let min = h.eigenvalues_desc().last().copied().unwrap_or(0.0);
        Ok(if min >= 0.0 { h.quad_form(v) } else { h.psd_clipped().quad_form(v) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaylorTerms {
    pub first_order: f64,
    pub second_order: f64,
    pub total: f64,
}

/// `(θ_t − θ_o)ᵀ∇L_o(θ_o) + ½(θ_t − θ_o)ᵀ H_o (θ_t − θ_o)`
pub fn taylor_forgetting(cs: &CheckpointSet, view: HessianView, o: usize, t: usize) -> Result<TaylorTerms> {
    if o == 0 || o > t {
        return Err(Error::InvalidArgument(format!("need 1 ≤ o ≤ t, got o = {o}, t = {t}")));
    }
    let d = linalg::sub(cs.theta(t)?, cs.theta(o)?);
    let g = cs.grads.get(o - 1).and_then(|g| g.as_ref()).ok_or(Error::MissingHessian(o))?;
    let first_order = linalg::dot(&d, g);
    let second_order = 0.5 * cs.quad(view, o, &d)?;
    Ok(TaylorTerms {
        first_order,
        second_order,
        total: first_order + second_order,
    })
}

/// Recursive estimate of `E(t)` seeded with `E(1) = 0`:
/// `E(s) = (1/s)((s−1)E(s−1) + ½Δ_sᵀ(Σ_{o<s} H_o)Δ_s + vᵀΔ_s)` with
/// `v = Σ_{o<s} H_o(θ_{s−1} − θ_o)`.
pub fn recursive_avg_forgetting(cs: &CheckpointSet, view: HessianView, t: usize) -> Result<f64> {
    Ok(*recursive_series(cs, view, t)?.last().unwrap())
}

/// `[E(1), .., E(t)]` from the recursion.
pub fn recursive_series(cs: &CheckpointSet, view: HessianView, t: usize) -> Result<Vec<f64>> {
    if t < 2 {
        return Err(Error::InvalidArgument(format!("recursive estimate needs t ≥ 2, got {t}")));
    }
    if t > cs.tasks() {
        return Err(Error::MissingEntry { checkpoint: t, task: t });
    }
    let mut out = vec![0.0];
    for s in 2..=t {
        let delta = cs.delta(s)?;
        let prev = cs.theta(s - 1)?;
        let mut quad = 0.0;
        let mut lin = 0.0;
        for o in 1..s {
            quad += cs.quad(view, o, &delta)?;
            let back = linalg::sub(prev, cs.theta(o)?);
            lin += cs.bilinear(view, o, &back, &delta)?;
        }
        let e_prev = out[s - 2];
        out.push(((s - 1) as f64 * e_prev + 0.5 * quad + lin) / s as f64);
    }
    Ok(out)
}

/// `Δ_tᵀ ((1/t) Σ_{o<t} H_o⁺) Δ_t` with `H⁺` the PSD-clipped Hessian.
pub fn vnc(cs: &CheckpointSet, t: usize) -> Result<f64> {
    if t < 2 {
        return Err(Error::InvalidArgument(format!("VNC needs t ≥ 2, got {t}")));
    }
    let delta = cs.delta(t)?;
    let mut s = 0.0;
    for o in 1..t {
        s += cs.clipped_quad(o, &delta)?;
    }
    Ok((s / t as f64).max(0.0))
}

/// Default "prior forgetting ≈ 0" threshold, in loss units.
pub const THEOREM1_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Theorem1Check {
    pub predicted: f64,
    pub measured: f64,
    pub gap: f64,
    /// False when some `|E(s)|`, `s < t`, exceeds the threshold.
    pub assumption_holds: bool,
}

/// Compares `½Δ_tᵀ((1/t) Σ_{o<t} H_o)Δ_t` with the ledger's `E(t)`.
pub fn theorem1_check(cs: &CheckpointSet, ledger: &ForgettingLedger, t: usize, threshold: f64) -> Result<Theorem1Check> {
    if t < 2 {
        return Err(Error::InvalidArgument(format!("forgetting prediction needs t ≥ 2, got {t}")));
    }
    let delta = cs.delta(t)?;
    let mut q = 0.0;
    for o in 1..t {
        q += cs.clipped_quad(o, &delta)?;
    }
    let predicted = 0.5 * q / t as f64;
    let measured = ledger.avg_forgetting(t)?;
    let mut assumption_holds = true;
    for s in 1..t {
        if ledger.avg_forgetting(s)?.abs() > threshold {
            assumption_holds = false;
        }
    }
    Ok(Theorem1Check {
        predicted,
        measured,
        gap: (predicted - measured).abs(),
        assumption_holds,
    })
}
