//! Second-order machinery: Hessian-vector products, dense Hessians and
//! their outer-product / functional split, deflated power iteration and
//! spectrum summaries.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{self, DenseSymmetric, EigenPairs};
use crate::mlp::{self, view_wt, Dataset, LossKind, MlpSpec, ParamVector, Tape};

/// Largest parameter count for which dense Hessians are assembled.
pub const DEFAULT_CAP: usize = 5000;

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 1000;

/// Cached forward/backward state for repeated Hessian-vector products on
/// one `(θ, data)` pair.
pub struct Curvature<'a> {
    spec: &'a MlpSpec,
    theta: &'a [f64],
    layout: mlp::Layout,
    tape: Tape,
    /// `σ'(z_l)` for hidden layers.
    deriv: Vec<DMatrix<f64>>,
    /// `∂L/∂z_l` (already divided by n).
    g: Vec<DMatrix<f64>>,
    /// Softmax outputs, `C × n` (cross-entropy only).
    probs: DMatrix<f64>,
    n: usize,
}

impl<'a> Curvature<'a> {
    pub fn new(spec: &'a MlpSpec, params: &'a ParamVector, data: &'a Dataset) -> Result<Self> {
        mlp::check_params(spec, params)?;
        mlp::mean_loss(spec, params, data)?;
        let theta = params.values();
        let layout = spec.layout();
        let tape = Tape::run(spec, theta, data.inputs());
        let nl = layout.blocks.len();
        let n = data.len();
        let deriv: Vec<DMatrix<f64>> = (0..nl - 1).map(|l| tape.deriv(spec, l)).collect();
        let logits = tape.logits();
        let c = logits.nrows();
        let mut probs = DMatrix::zeros(c, n);
        let mut gout = DMatrix::zeros(c, n);
        for (i, &y) in data.labels().iter().enumerate() {
            let z = logits.column(i);
            if spec.loss_kind == LossKind::CrossEntropy {
                probs.set_column(i, &mlp::dvec(&mlp::softmax(z.as_slice())));
            }
            let gi = mlp::loss_logit_grad(spec, z.as_slice(), y);
            for (k, v) in gi.into_iter().enumerate() {
                gout[(k, i)] = v / n as f64;
            }
        }
        let mut g = vec![DMatrix::zeros(0, 0); nl];
        g[nl - 1] = gout;
        for l in (1..nl).rev() {
            let back = view_wt(theta, &layout.blocks[l]).transpose() * &g[l];
            g[l - 1] = back.component_mul(&deriv[l - 1]);
        }
        Ok(Self {
            spec,
            theta,
            layout,
            tape,
            deriv,
            g,
            probs,
            n,
        })
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    /// `H v` by forward-over-reverse differentiation.
    pub fn hvp(&self, v: &[f64]) -> Vec<f64> {
        let nl = self.layout.blocks.len();
        let mut out = vec![0.0; v.len()];
        // Forward tangents. dA_0 = 0.
        let mut da: Vec<Option<DMatrix<f64>>> = vec![None; nl];
        let mut dz_last = DMatrix::zeros(0, 0);
        for l in 0..nl {
            let b = &self.layout.blocks[l];
            let dwt = view_wt(v, b);
            let mut dz = dwt * &self.tape.a[l];
            if let Some(dal) = &da[l] {
                dz += view_wt(self.theta, b) * dal;
            }
            if let Some(r) = b.bias_range() {
                let db = &v[r];
                for mut col in dz.column_iter_mut() {
                    for (x, d) in col.iter_mut().zip(db) {
                        *x += d;
                    }
                }
            }
            if l + 1 < nl {
                da[l + 1] = Some(dz.component_mul(&self.deriv[l]));
            } else {
                dz_last = dz;
            }
        }
        // Output-layer tangent of ∂L/∂z.
        let inv_n = 1.0 / self.n as f64;
        let mut dg = match self.spec.loss_kind {
            LossKind::Mse => dz_last * inv_n,
            LossKind::CrossEntropy => {
                let mut m = dz_last;
                for (mut col, p) in m.column_iter_mut().zip(self.probs.column_iter()) {
                    let pd = p.dot(&col);
                    for (x, &pi) in col.iter_mut().zip(p.iter()) {
                        *x = (pi * *x - pi * pd) * inv_n;
                    }
                }
                m
            }
        };
        for l in (0..nl).rev() {
            let b = &self.layout.blocks[l];
            let mut gw = &dg * self.tape.a[l].transpose();
            if let Some(dal) = &da[l] {
                gw += &self.g[l] * dal.transpose();
            }
            for (dst, src) in out[b.weight_range()].iter_mut().zip(gw.iter()) {
                *dst += src;
            }
            if let Some(r) = b.bias_range() {
                for (j, dst) in out[r].iter_mut().enumerate() {
                    *dst += dg.row(j).sum();
                }
            }
            if l > 0 {
                let back = view_wt(v, b).transpose() * &self.g[l] + view_wt(self.theta, b).transpose() * &dg;
                dg = back.component_mul(&self.deriv[l - 1]);
            }
        }
        out
    }

    pub fn exact(&self, cap: usize) -> Result<DenseSymmetric> {
        let p = self.dim();
        if p > cap {
            return Err(Error::CapacityExceeded { params: p, cap });
        }
        let mut h = DMatrix::zeros(p, p);
        let mut e = vec![0.0; p];
        for j in 0..p {
            e[j] = 1.0;
            let col = self.hvp(&e);
            h.column_mut(j).copy_from_slice(&col);
            e[j] = 0.0;
        }
        DenseSymmetric::new(h)
    }

    /// `(1/n) Σ J_i (∇²_f ℓ_i) J_iᵀ`, assembled as `K Kᵀ` with
    /// `K_i = J_i L_i / √n` and `L_i L_iᵀ = ∇²_f ℓ_i`.
    pub fn outer_product(&self, cap: usize) -> Result<DenseSymmetric> {
        let p = self.dim();
        if p > cap {
            return Err(Error::CapacityExceeded { params: p, cap });
        }
        let c = self.spec.output_dim();
        let chunk = (4096 / c).max(1);
        let scale = 1.0 / (self.n as f64).sqrt();
        let mut h = DMatrix::zeros(p, p);
        let mut start = 0;
        while start < self.n {
            let end = (start + chunk).min(self.n);
            let mut k = DMatrix::zeros(p, c * (end - start));
            for i in start..end {
                let seed = self.factor(i) * scale;
                let jl = mlp::jacobian_times_tape(self.spec, self.theta, &self.tape, i, &seed);
                k.columns_mut((i - start) * c, c).copy_from(&jl);
            }
            h.gemm(1.0, &k, &k.transpose(), 1.0);
            start = end;
        }
        DenseSymmetric::new(h)
    }

    /// `L` with `L Lᵀ = ∇²_f ℓ_i`.
    fn factor(&self, i: usize) -> DMatrix<f64> {
        let c = self.spec.output_dim();
        match self.spec.loss_kind {
            LossKind::Mse => DMatrix::identity(c, c),
            LossKind::CrossEntropy => {
                let p = self.probs.column(i);
                DMatrix::from_fn(c, c, |a, b| {
                    let d = if a == b { p[a].sqrt() } else { 0.0 };
                    d - p[a] * p[b].sqrt()
                })
            }
        }
    }
}

pub fn hvp(spec: &MlpSpec, params: &ParamVector, data: &Dataset, v: &ParamVector) -> Result<ParamVector> {
    if v.len() != params.len() {
        return Err(Error::dim("hvp direction", params.len(), v.len()));
    }
    if v.values().iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("hvp direction".into()));
    }
    let ctx = Curvature::new(spec, params, data)?;
    params.with_values(ctx.hvp(v.values()))
}

pub fn exact_hessian(spec: &MlpSpec, params: &ParamVector, data: &Dataset) -> Result<DenseSymmetric> {
    exact_hessian_capped(spec, params, data, DEFAULT_CAP)
}

pub fn exact_hessian_capped(spec: &MlpSpec, params: &ParamVector, data: &Dataset, cap: usize) -> Result<DenseSymmetric> {
    if spec.param_count() > cap {
        return Err(Error::CapacityExceeded {
            params: spec.param_count(),
            cap,
        });
    }
    Curvature::new(spec, params, data)?.exact(cap)
}

pub fn outer_product_hessian(spec: &MlpSpec, params: &ParamVector, data: &Dataset) -> Result<DenseSymmetric> {
    if spec.param_count() > DEFAULT_CAP {
        return Err(Error::CapacityExceeded {
            params: spec.param_count(),
            cap: DEFAULT_CAP,
        });
    }
    Curvature::new(spec, params, data)?.outer_product(DEFAULT_CAP)
}

pub fn functional_hessian(spec: &MlpSpec, params: &ParamVector, data: &Dataset) -> Result<DenseSymmetric> {
    let parts = HessianParts::compute(spec, params, data, DEFAULT_CAP)?;
    Ok(parts.functional)
}

/// The exact Hessian together with its outer-product and functional parts.
pub struct HessianParts {
    pub exact: DenseSymmetric,
    pub outer: DenseSymmetric,
    pub functional: DenseSymmetric,
}

impl HessianParts {
    pub fn compute(spec: &MlpSpec, params: &ParamVector, data: &Dataset, cap: usize) -> Result<Self> {
        if spec.param_count() > cap {
            return Err(Error::CapacityExceeded {
                params: spec.param_count(),
                cap,
            });
        }
        let ctx = Curvature::new(spec, params, data)?;
        let exact = ctx.exact(cap)?;
        let outer = ctx.outer_product(cap)?;
        let functional = exact.sub(&outer);
        Ok(Self { exact, outer, functional })
    }
}

/// Top-`k` eigenpairs by deflated power iteration on a matrix-free
/// operator. Pair `i` starts from a Gaussian vector seeded with
/// `seed + i` and stops when the Rayleigh quotient changes by less than
/// `tol · max(1, |ρ|)` between iterations; pairs that hit `max_iter` are
/// returned with `converged = false`.
pub fn top_k_eigs(
    oracle: impl Fn(&[f64]) -> Vec<f64>,
    p: usize,
    k: usize,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<EigenPairs> {
    if k > p {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds dimension {p}")));
    }
    if tol <= 0.0 || tol.is_nan() {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    let mut values: Vec<f64> = Vec::with_capacity(k);
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut converged = Vec::with_capacity(k);
    let deflate = |v: &[f64], values: &[f64], vecs: &[Vec<f64>]| -> Vec<f64> {
        let mut hv = oracle(v);
        for (l, u) in values.iter().zip(vecs) {
            linalg::axpy(-l * linalg::dot(u, v), u, &mut hv);
        }
        hv
    };
    for i in 0..k {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let mut v: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
        orthogonalize(&mut v, &vecs);
        normalize(&mut v);
        let mut rho = f64::NAN;
        let mut ok = false;
        let mut hv = deflate(&v, &values, &vecs);
        for _ in 0..max_iter {
            let new_rho = linalg::dot(&v, &hv);
            let mut w = hv.clone();
            orthogonalize(&mut w, &vecs);
            if linalg::norm(&w) == 0.0 {
                ok = true;
                break;
            }
            normalize(&mut w);
            let done = (new_rho - rho).abs() < tol * new_rho.abs().max(1.0);
            rho = new_rho;
            v = w;
            hv = deflate(&v, &values, &vecs);
            if done {
                ok = true;
                break;
            }
        }
        rho = linalg::dot(&v, &hv);
        values.push(rho);
        vecs.push(v);
        converged.push(ok);
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| values[b].abs().partial_cmp(&values[a].abs()).unwrap_or(std::cmp::Ordering::Equal));
    let vectors = DMatrix::from_fn(p, k, |r, c| vecs[order[c]][r]);
    Ok(EigenPairs {
        values: order.iter().map(|&i| values[i]).collect(),
        vectors,
        converged: order.iter().map(|&i| converged[i]).collect(),
    })
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for u in basis {
            let c = linalg::dot(u, v);
            linalg::axpy(-c, u, v);
        }
    }
}

fn normalize(v: &mut [f64]) {
    let n = linalg::norm(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

/// Smallest `k` whose leading squared eigenvalues hold at least
/// `(1 − epsilon)` of the total spectral energy.
pub fn energy_cutoff_k(values: &[f64], epsilon: f64) -> usize {
    if values.is_empty() {
        return 0;
    }
    if epsilon <= 0.0 {
        return values.iter().filter(|&&v| v != 0.0).count();
    }
    let total: f64 = values.iter().map(|v| v * v).sum();
    let target = (1.0 - epsilon.min(1.0)) * total;
    let mut acc = 0.0;
    if acc >= target {
        return 0;
    }
    for (i, v) in values.iter().enumerate() {
        acc += v * v;
        if acc >= target {
            return i + 1;
        }
    }
    values.len()
}

/// Count of `|λ_i| ≥ lambda_frac · max|λ|`.
pub fn effective_rank(values: &[f64], lambda_frac: f64) -> usize {
    let top = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if top == 0.0 {
        return 0;
    }
    values.iter().filter(|v| v.abs() >= lambda_frac * top).count()
}

/// Numerical rank with the usual `P · ε_mach · max|λ|` threshold.
pub fn numerical_rank(values: &[f64]) -> usize {
    let frac = values.len().max(1) as f64 * f64::EPSILON;
    effective_rank(values, frac)
}
