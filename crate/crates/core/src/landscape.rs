//! Landscape diagnostics: perturbation curves, block-diagonality,
//! spectral similarity and rank tracking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::forgetting::CheckpointSet;
use crate::hessian::{effective_rank, numerical_rank};
use crate::linalg::{self, DenseSymmetric};
use crate::mlp::{self, Dataset, Layout, MlpSpec, ParamVector};

pub const DEFAULT_N_RANDOM: usize = 32;

/// Denominators below this are flagged unreliable.
pub const MIN_DENOMINATOR: f64 = 1e-15;

/// `n` log-spaced radii between `lo` and `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n).map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64)).collect()
}

/// The default 25-point grid over `[1e-3, 1e4]`.
pub fn default_radii() -> Vec<f64> {
    log_grid(1e-3, 1e4, 25)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbPoint {
    pub r: f64,
    pub s: f64,
    pub denominator: f64,
    /// Standard error of the denominator's sample mean.
    pub denom_stderr: f64,
    pub reliable: bool,
}

/// `s(r) = |L(θ + r v) − L(θ)| / mean_k |L(θ + r μ'_k) − L(θ)|` with
/// `μ'_k` seeded unit Gaussian directions, the same at every radius.
pub fn perturbation_curve(
    loss: impl Fn(&[f64]) -> f64,
    theta: &[f64],
    v: &[f64],
    radii: &[f64],
    n_random: usize,
    seed: u64,
) -> Result<Vec<PerturbPoint>> {
    if v.len() != theta.len() {
        return Err(Error::dim("perturbation direction", theta.len(), v.len()));
    }
    if n_random == 0 {
        return Err(Error::InvalidArgument("n_random must be positive".into()));
    }
    let vn = linalg::norm(v);
    if vn == 0.0 {
        return Err(Error::InvalidArgument("perturbation direction is zero".into()));
    }
    let v: Vec<f64> = v.iter().map(|x| x / vn).collect();
    let p = theta.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs: Vec<Vec<f64>> = (0..n_random)
        .map(|_| {
            let mu: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = linalg::norm(&mu);
            mu.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let base = loss(theta);
    let shifted = |d: &[f64], r: f64| -> f64 {
        let q: Vec<f64> = theta.iter().zip(d).map(|(t, x)| t + r * x).collect();
        (loss(&q) - base).abs()
    };
    let mut out = Vec::with_capacity(radii.len());
    for &r in radii {
        let num = shifted(&v, r);
        let samples: Vec<f64> = dirs.iter().map(|d| shifted(d, r)).collect();
        let mean = samples.iter().sum::<f64>() / n_random as f64;
        let var = if n_random > 1 {
            samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n_random - 1) as f64
        } else {
            0.0
        };
        let reliable = mean >= MIN_DENOMINATOR;
        out.push(PerturbPoint {
            r,
            s: if reliable { num / mean } else { f64::NAN },
            denominator: mean,
            denom_stderr: (var / n_random as f64).sqrt(),
            reliable,
        });
    }
    Ok(out)
}

/// Perturbation curve of a network's mean loss along `v`.
pub fn perturbation_score(
    spec: &MlpSpec,
    params: &ParamVector,
    data: &Dataset,
    v: &[f64],
    radii: &[f64],
    n_random: usize,
    seed: u64,
) -> Result<Vec<PerturbPoint>> {
    mlp::mean_loss(spec, params, data)?;
    perturbation_curve(|q| mlp::mean_loss_raw(spec, q, data), params.values(), v, radii, n_random, seed)
}

/// First radius where `|s(r) − 1| < 0.1` holds for 3 consecutive points.
pub fn convergence_radius(curve: &[PerturbPoint]) -> Option<f64> {
    let ok: Vec<bool> = curve.iter().map(|p| p.reliable && (p.s - 1.0).abs() < 0.1).collect();
    (0..curve.len().saturating_sub(2)).find(|&i| ok[i] && ok[i + 1] && ok[i + 2]).map(|i| curve[i].r)
}

/// Layer index of each weight coordinate; bias coordinates map to `None`.
pub fn weight_blocks(layout: &Layout) -> Vec<Option<usize>> {
    let mut out = vec![None; layout.len];
    for b in &layout.blocks {
        for i in b.weight_range() {
            out[i] = Some(b.layer);
        }
    }
    out
}

/// `D(M) = 1 − mean|M_ij| off-block / mean|M_ij| in-block`. Coordinates
/// with no block are left out entirely.
pub fn block_diagonality_partition(m: &DenseSymmetric, blocks: &[Option<usize>]) -> Result<f64> {
    if blocks.len() != m.dim() {
        return Err(Error::dim("block partition", m.dim(), blocks.len()));
    }
    let (mut sin, mut nin, mut sout, mut nout) = (0.0, 0usize, 0.0, 0usize);
    let mat = m.matrix();
    for j in 0..m.dim() {
        let Some(bj) = blocks[j] else { continue };
        for i in 0..m.dim() {
            let Some(bi) = blocks[i] else { continue };
            let a = mat[(i, j)].abs();
            if bi == bj {
                sin += a;
                nin += 1;
            } else {
                sout += a;
                nout += 1;
            }
        }
    }
    if nin == 0 || sin == 0.0 {
        return Err(Error::Undefined("in-block mean is zero".into()));
    }
    let off = if nout == 0 { 0.0 } else { sout / nout as f64 };
    Ok(1.0 - off / (sin / nin as f64))
}

pub fn block_diagonality(m: &DenseSymmetric, layout: &Layout) -> Result<f64> {
    block_diagonality_partition(m, &weight_blocks(layout))
}

/// `⟨A, B⟩_F / (‖A‖_F ‖B‖_F)`
pub fn spectral_similarity(a: &DenseSymmetric, b: &DenseSymmetric) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::dim("spectral similarity", a.dim(), b.dim()));
    }
    let na = a.frobenius_norm();
    let nb = b.frobenius_norm();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Undefined("zero Frobenius norm".into()));
    }
    if a == b {
        return Ok(1.0);
    }
    let ip = a.matrix().dot(b.matrix());
    Ok((ip / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankRow {
    pub t: usize,
    pub rank: usize,
    pub lambda_frac: f64,
    pub eff_rank: usize,
}

/// Ranks of the running average `(1/(t−1)) Σ_{o<t} H_o` for `t = 2..=T`.
pub fn rank_evolution(cs: &CheckpointSet, lambda_fracs: &[f64]) -> Result<Vec<RankRow>> {
    let mut rows = Vec::new();
    let mut sum = DenseSymmetric::zeros(cs.dim());
    for t in 2..=cs.tasks() {
        sum = sum.add(cs.hessian(t - 1)?);
        let avg = sum.scale(1.0 / (t - 1) as f64);
        let values = avg.eigen().values;
        let rank = numerical_rank(&values);
        for &f in lambda_fracs {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::InvalidArgument(format!("lambda_frac {f} outside (0, 1]")));
            }
            rows.push(RankRow {
                t,
                rank,
                lambda_frac: f,
                eff_rank: effective_rank(&values, f),
            });
        }
    }
    Ok(rows)
}
