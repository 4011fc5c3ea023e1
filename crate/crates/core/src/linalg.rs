//! Sparse kernels, factorizations and preconditioned conjugate gradients.

use nalgebra::DMatrix;
use sprs::{CsMat, TriMat};
use sprs_ldl::{Ldl, LdlNumeric};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("conjugate gradients stalled after {iterations} iterations (relative residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("operator is not positive definite (curvature {0:e})")]
    Indefinite(f64),
    #[error("factorization failed: {0}")]
    Factorization(String),
}

/// `y = alpha * A x + beta * y` for CSR `A`.
pub fn csr_matvec(a: &CsMat<f64>, x: &[f64], y: &mut [f64], alpha: f64, beta: f64) {
    debug_assert!(a.is_csr());
    debug_assert_eq!(a.cols(), x.len());
    debug_assert_eq!(a.rows(), y.len());
    let ip = a.indptr();
    let ip = ip.raw_storage();
    let idx = a.indices();
    let dat = a.data();
    for i in 0..a.rows() {
        let mut s = 0.0;
        for k in ip[i]..ip[i + 1] {
            s += dat[k] * x[idx[k]];
        }
        y[i] = alpha * s + if beta == 0.0 { 0.0 } else { beta * y[i] };
    }
}

pub fn csr_from_triplets(rows: usize, cols: usize, trip: &[(usize, usize, f64)]) -> CsMat<f64> {
    let mut t = TriMat::with_capacity((rows, cols), trip.len());
    for &(i, j, v) in trip {
        t.add_triplet(i, j, v);
    }
    t.to_csr()
}

pub fn transpose(a: &CsMat<f64>) -> CsMat<f64> {
    a.transpose_view().to_csr()
}

/// `A^T B C` with everything in CSR.
pub fn congruence(a: &CsMat<f64>, b: &CsMat<f64>, c: &CsMat<f64>) -> CsMat<f64> {
    let at = transpose(a);
    let bc = b * c;
    prune(&(&at * &bc))
}

pub fn product(a: &CsMat<f64>, b: &CsMat<f64>) -> CsMat<f64> {
    prune(&(a * b))
}

/// Drop explicit zeros.
pub fn prune(a: &CsMat<f64>) -> CsMat<f64> {
    let mut t = TriMat::with_capacity(a.shape(), a.nnz());
    for (v, (i, j)) in a.iter() {
        if *v != 0.0 {
            t.add_triplet(i, j, *v);
        }
    }
    t.to_csr()
}

pub fn scaled(a: &CsMat<f64>, s: f64) -> CsMat<f64> {
    a.map(|v| v * s)
}

/// `sum_k s_k A_k` for same-shape matrices.
pub fn linear_combination(parts: &[(f64, &CsMat<f64>)]) -> CsMat<f64> {
    let shape = parts[0].1.shape();
    let nnz = parts.iter().map(|p| p.1.nnz()).sum();
    let mut t = TriMat::with_capacity(shape, nnz);
    for &(s, a) in parts {
        assert_eq!(a.shape(), shape);
        for (v, (i, j)) in a.iter() {
            t.add_triplet(i, j, s * v);
        }
    }
    t.to_csr()
}

/// Explicit Kronecker product, index `(i, j) -> i * rows(B) + j`.
pub fn kron(a: &CsMat<f64>, b: &CsMat<f64>) -> CsMat<f64> {
    let (ra, ca) = a.shape();
    let (rb, cb) = b.shape();
    let mut t = TriMat::with_capacity((ra * rb, ca * cb), a.nnz() * b.nnz());
    for (va, (i, p)) in a.iter() {
        for (vb, (j, q)) in b.iter() {
            t.add_triplet(i * rb + j, p * cb + q, va * vb);
        }
    }
    t.to_csr()
}

pub fn to_dense(a: &CsMat<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(a.rows(), a.cols());
    for (v, (i, j)) in a.iter() {
        m[(i, j)] += *v;
    }
    m
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Inverse of a symmetric positive definite matrix, exact or approximate.
pub enum SpdSolver {
    Ldl(Box<LdlNumeric<f64, usize>>),
    Dense(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Diagonal(Vec<f64>),
    Identity,
}

impl std::fmt::Debug for SpdSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SpdSolver::Ldl(l) => write!(f, "Ldl(n={})", l.problem_size()),
            SpdSolver::Dense(c) => write!(f, "Dense(n={})", c.l_dirty().nrows()),
            SpdSolver::Diagonal(d) => write!(f, "Diagonal(n={})", d.len()),
            SpdSolver::Identity => write!(f, "Identity"),
        }
    }
}

/// Dimension below which a dense Cholesky factor is used.
const DENSE_LIMIT: usize = 64;

impl SpdSolver {
    pub fn ldl(a: &CsMat<f64>) -> Result<Self, SolveError> {
        if a.rows() == 0 {
            return Ok(SpdSolver::Identity);
        }
        if a.rows() <= DENSE_LIMIT {
            return Self::dense(&to_dense(a));
        }
        // products of factors can be asymmetric in the last bit; the ordering step needs exact symmetry
        let at = transpose(a);
        let sym = linear_combination(&[(0.5, a), (0.5, &at)]);
        let csc = sym.to_csc();
        let f = Ldl::new()
            .check_symmetry(sprs::SymmetryCheck::DontCheckSymmetry)
            .numeric(csc.view())
            .map_err(|e| SolveError::Factorization(e.to_string()))?;
        if f.d().iter().any(|&d| !(d > 0.0)) {
            return Err(SolveError::Factorization("non-positive pivot".into()));
        }
        Ok(SpdSolver::Ldl(Box::new(f)))
    }

    pub fn dense(a: &DMatrix<f64>) -> Result<Self, SolveError> {
        let sym = (a + a.transpose()) * 0.5;
        nalgebra::Cholesky::new(sym)
            .map(SpdSolver::Dense)
            .ok_or_else(|| SolveError::Factorization("dense matrix not positive definite".into()))
    }

    pub fn diagonal(a: &CsMat<f64>) -> Result<Self, SolveError> {
        let d: Vec<f64> = a.diag().to_dense().to_vec();
        if let Some(&bad) = d.iter().find(|&&x| !(x > 0.0)) {
            return Err(SolveError::Indefinite(bad));
        }
        Ok(SpdSolver::Diagonal(d))
    }

    /// LDL when the factor is likely cheap, otherwise Jacobi.
    pub fn auto(a: &CsMat<f64>) -> Result<Self, SolveError> {
        let n = a.rows();
        if n <= 1000 || (n <= 40_000 && a.nnz() <= 12 * n) {
            Self::ldl(a)
        } else {
            Self::diagonal(a)
        }
    }

    pub fn is_exact(&self) -> bool {
        !matches!(self, SpdSolver::Diagonal(_))
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        match self {
            SpdSolver::Ldl(f) => {
                let y = f.solve(&x[..]);
                x.copy_from_slice(&y);
            }
            SpdSolver::Dense(c) => {
                let mut v = nalgebra::DVector::from_column_slice(x);
                c.solve_mut(&mut v);
                x.copy_from_slice(v.as_slice());
            }
            SpdSolver::Diagonal(d) => {
                for (xi, di) in x.iter_mut().zip(d) {
                    *xi /= di;
                }
            }
            SpdSolver::Identity => {}
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgInfo {
    pub iterations: usize,
    pub residual: f64,
}

/// Preconditioned CG for `A x = b` with relative residual `tol`; `x` holds the initial guess.
pub fn pcg(
    apply: &dyn Fn(&[f64], &mut [f64]),
    precond: &dyn Fn(&[f64], &mut [f64]),
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> Result<CgInfo, SolveError> {
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(CgInfo { iterations: 0, residual: 0.0 });
    }
    let mut r = vec![0.0; n];
    apply(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut z = vec![0.0; n];
    precond(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut res = norm(&r) / bnorm;
    if res <= tol {
        return Ok(CgInfo { iterations: 0, residual: res });
    }
    for it in 1..=max_iter {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(SolveError::Indefinite(pap));
        }
        let alpha = rz / pap;
        axpy(alpha, &p, x);
        axpy(-alpha, &ap, &mut r);
        res = norm(&r) / bnorm;
        if res <= tol {
            return Ok(CgInfo { iterations: it, residual: res });
        }
        precond(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(SolveError::NotConverged { iterations: max_iter, residual: res })
}
