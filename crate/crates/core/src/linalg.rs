//! Dense linear-algebra helpers shared by the Hessian, projection and
//! quadratic-simulator modules. Everything is `f64`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Symmetry tolerance applied after explicit symmetrization.
pub const SYMMETRY_TOL: f64 = 1e-10;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// A square symmetric matrix, stored densely.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSymmetric {
    matrix: DMatrix<f64>,
}

impl DenseSymmetric {
    /// Symmetrizes `(A + Aᵀ)/2` and rejects non-finite entries.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::dim("DenseSymmetric rows", matrix.ncols(), matrix.nrows()));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("symmetric matrix".into()));
        }
        let matrix = (&matrix + matrix.transpose()) * 0.5;
        Ok(Self { matrix })
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        Self {
            matrix: DMatrix::from_diagonal(&DVector::from_column_slice(diag)),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            matrix: DMatrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[(i, j)]
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        let x = DVector::from_column_slice(v);
        (&self.matrix * x).as_slice().to_vec()
    }

    /// `vᵀ M v`
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        dot(v, &self.matvec(v))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.matrix.norm()
    }

    pub fn add(&self, other: &DenseSymmetric) -> DenseSymmetric {
        DenseSymmetric {
            matrix: &self.matrix + &other.matrix,
        }
    }

    pub fn sub(&self, other: &DenseSymmetric) -> DenseSymmetric {
        DenseSymmetric {
            matrix: &self.matrix - &other.matrix,
        }
    }

    pub fn scale(&self, alpha: f64) -> DenseSymmetric {
        DenseSymmetric {
            matrix: &self.matrix * alpha,
        }
    }

    pub fn max_abs_diff(&self, other: &DenseSymmetric) -> f64 {
        (&self.matrix - &other.matrix).amax()
    }

    pub fn is_symmetric(&self) -> bool {
        (&self.matrix - self.matrix.transpose()).amax() <= SYMMETRY_TOL
    }

    /// Full eigendecomposition, sorted by descending |λ|.
    pub fn eigen(&self) -> EigenPairs {
        let eig = self.matrix.clone().symmetric_eigen();
        let mut order: Vec<usize> = (0..self.dim()).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .abs()
                .partial_cmp(&eig.eigenvalues[a].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let vectors = DMatrix::from_fn(self.dim(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
        EigenPairs {
            converged: vec![true; order.len()],
            values,
            vectors,
        }
    }

    /// Eigenvalues sorted descending by value (not magnitude).
    pub fn eigenvalues_desc(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.matrix.symmetric_eigenvalues().iter().copied().collect();
        v.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        v
    }

    /// Projection onto the PSD cone: negative eigenvalues clipped at 0.
    pub fn psd_clipped(&self) -> DenseSymmetric {
        let eig = self.eigen();
        eig.reconstruct_with(|l| l.max(0.0))
    }
}

/// Eigenpairs sorted by descending magnitude of the eigenvalue.
#[derive(Debug, Clone)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    /// P×k, one eigenvector per column.
    pub vectors: DMatrix<f64>,
    /// `false` when the iterative solver hit its iteration cap for that pair.
    pub converged: Vec<bool>,
}

impl EigenPairs {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn vector(&self, i: usize) -> Vec<f64> {
        self.vectors.column(i).iter().copied().collect()
    }

    /// Keeps the leading `k` pairs.
    pub fn truncated(&self, k: usize) -> EigenPairs {
        let k = k.min(self.len());
        EigenPairs {
            values: self.values[..k].to_vec(),
            vectors: self.vectors.columns(0, k).into_owned(),
            converged: self.converged[..k].to_vec(),
        }
    }

    /// `max |VᵀV − I|`
    pub fn gram_residual(&self) -> f64 {
        let g = self.vectors.transpose() * &self.vectors;
        (g - DMatrix::identity(self.len(), self.len())).amax()
    }

    /// `V f(Λ) Vᵀ`
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> DenseSymmetric {
        let p = self.vectors.nrows();
        let mut scaled = self.vectors.clone();
        for (c, &l) in self.values.iter().enumerate() {
            let s = f(l);
            scaled.column_mut(c).scale_mut(s);
        }
        let m = if self.is_empty() {
            DMatrix::zeros(p, p)
        } else {
            scaled * self.vectors.transpose()
        };
        DenseSymmetric {
            matrix: (&m + m.transpose()) * 0.5,
        }
    }

    pub fn reconstruct(&self) -> DenseSymmetric {
        self.reconstruct_with(|l| l)
    }
}

/// Column-orthonormal basis that grows by Gram–Schmidt.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthoBasis {
    dim: usize,
    columns: DMatrix<f64>,
}

impl OrthoBasis {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            columns: DMatrix::zeros(dim, 0),
        }
    }

    /// Builds from columns that are already orthonormal (checked to 1e-8).
    pub fn from_orthonormal(columns: DMatrix<f64>) -> Result<Self> {
        let m = columns.ncols();
        let g = columns.transpose() * &columns;
        let resid = (g - DMatrix::identity(m, m)).amax();
        if m > 0 && resid > 1e-8 {
            return Err(Error::InvalidArgument(format!(
                "basis columns are not orthonormal (Gram residual {resid:e})"
            )));
        }
        Ok(Self {
            dim: columns.nrows(),
            columns,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.columns.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.columns
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.columns.column(i).iter().copied().collect()
    }

    /// `Mᵀ v`
    pub fn coefficients(&self, v: &[f64]) -> Vec<f64> {
        if self.rank() == 0 {
            return Vec::new();
        }
        let x = DVector::from_column_slice(v);
        (self.columns.transpose() * x).as_slice().to_vec()
    }

    /// `v ← v − M Mᵀ v`, in place.
    pub fn remove_component(&self, v: &mut [f64]) {
        if self.rank() == 0 {
            return;
        }
        let x = DVector::from_column_slice(v);
        let coeffs = self.columns.transpose() * &x;
        let proj = &self.columns * coeffs;
        for (vi, pi) in v.iter_mut().zip(proj.iter()) {
            *vi -= pi;
        }
    }

    /// Normalizes `v`, orthogonalizes it twice against the basis and
    /// appends it if the residual norm is at least `drop_tol`. Returns
    /// whether the vector was added.
    pub fn try_push(&mut self, v: &[f64], drop_tol: f64) -> bool {
        let n0 = norm(v);
        if n0 == 0.0 || !n0.is_finite() {
            return false;
        }
        let mut w: Vec<f64> = v.iter().map(|x| x / n0).collect();
        self.remove_component(&mut w);
        self.remove_component(&mut w);
        let r = norm(&w);
        if r < drop_tol {
            return false;
        }
        for x in &mut w {
            *x /= r;
        }
        let m = self.rank();
        let cols = std::mem::replace(&mut self.columns, DMatrix::zeros(0, 0));
        let mut cols = cols.insert_column(m, 0.0);
        cols.column_mut(m).copy_from_slice(&w);
        self.columns = cols;
        true
    }

    /// Max |MᵀM − I|.
    pub fn gram_residual(&self) -> f64 {
        let m = self.rank();
        if m == 0 {
            return 0.0;
        }
        let g = self.columns.transpose() * &self.columns;
        (g - DMatrix::identity(m, m)).amax()
    }

    /// True when every column of `other` lies in span(self) to `tol`.
    pub fn contains_span_of(&self, other: &OrthoBasis, tol: f64) -> bool {
        (0..other.rank()).all(|i| {
            let mut v = other.column(i);
            self.remove_component(&mut v);
            norm(&v) < tol
        })
    }
}

/// Pseudoinverse application through the eigendecomposition, with
/// eigenvalues below `rel_threshold * max|λ|` treated as zero.
pub fn pinv_apply(s: &DenseSymmetric, x: &[f64], rel_threshold: f64) -> Vec<f64> {
    let eig = s.eigen();
    let cut = rel_threshold * eig.values.first().map(|v| v.abs()).unwrap_or(0.0);
    let mut out = vec![0.0; x.len()];
    for (i, &l) in eig.values.iter().enumerate() {
        if l.abs() <= cut || l == 0.0 {
            continue;
        }
        let v = eig.vectors.column(i);
        let c: f64 = v.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() / l;
        for (o, vi) in out.iter_mut().zip(v.iter()) {
            *o += c * vi;
        }
    }
    out
}

/// Orthonormal basis of the numerical null space (|λ| ≤ rel_threshold·max|λ|).
pub fn null_space(s: &DenseSymmetric, rel_threshold: f64) -> DMatrix<f64> {
    let eig = s.eigen();
    let cut = rel_threshold * eig.values.first().map(|v| v.abs()).unwrap_or(0.0);
    let idx: Vec<usize> = eig
        .values
        .iter()
        .enumerate()
        .filter(|(_, l)| l.abs() <= cut)
        .map(|(i, _)| i)
        .collect();
    DMatrix::from_fn(s.dim(), idx.len(), |r, c| eig.vectors[(r, idx[c])])
}

/// Largest principal angle (radians) between the column spaces of two
/// column-orthonormal matrices with the same number of columns.
pub fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let m = a.transpose() * b;
    let sv = m.singular_values();
    let smin = sv.iter().copied().fold(f64::INFINITY, f64::min).clamp(-1.0, 1.0);
    smin.acos()
}
