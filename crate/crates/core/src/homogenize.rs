//! Periodic cell problems and homogenized coefficients.
//!
//! * `b`: find periodic `w^k` with `int_Y B (e_k + grad w^k) . grad v = 0`; then
//!   `b0_pq = int_Y (e_p + grad w^p) . B (e_q + grad w^q)`. Solved with P1 on the
//!   periodic cell mesh, vertex 0 pinned.
//! * `a` (2D, scalar curl): minimize `int_Y a (1 + s)^2` over zero-mean piecewise
//!   constants `s`. Solved by CG in the Haar basis.
//!
//! The `b` solve accepts a 2x2 matrix coefficient, which is what the recursive
//! ladder for several micro scales feeds into it.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use sprs::CsMat;
use thiserror::Error;

use crate::elements::{TriangleGeometry, TriangleRule};
use crate::fields::Coefficient;
use crate::linalg::{csr_from_triplets, csr_matvec, norm, pcg, SolveError, SpdSolver};
use crate::mesh2d::{MeshError, MeshHierarchy, Point};
use crate::spaces::{FactorBasis, FactorKind, SpaceError};

pub type Mat2 = [[f64; 2]; 2];

#[derive(Debug, Error)]
pub enum HomogenizeError {
    #[error("coefficient is not positive at y = ({}, {}): {value}", at[0], at[1])]
    NonPositive { value: f64, at: Point },
    #[error("cell solve failed: {0}")]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("the recursive ladder needs at least one scale")]
    NoScales,
}

/// Geometry of the periodic cell mesh at one level, shared by all solves.
pub struct CellMesh {
    pub level: u32,
    pub triangles: Vec<[usize; 3]>,
    pub geometry: Vec<TriangleGeometry>,
    pub n_vertices: usize,
    rule: TriangleRule,
    haar: CsMat<f64>,
}

impl CellMesh {
    pub fn new(level: u32) -> Result<Self, HomogenizeError> {
        let meshes = MeshHierarchy::new(level, true)?;
        let mesh = meshes.level(level)?;
        let geometry = (0..mesh.n_triangles())
            .map(|t| TriangleGeometry::new(mesh.triangle_points(t)))
            .collect::<Result<Vec<_>, _>>()
            .expect("cell mesh triangles are regular");
        let haar = FactorBasis::new(FactorKind::PconstZeroMeanPeriodic, level, level, &meshes)?.synthesis;
        Ok(CellMesh {
            level,
            triangles: mesh.triangles.clone(),
            geometry,
            n_vertices: mesh.n_vertices(),
            rule: TriangleRule::degree5(),
            haar,
        })
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    /// `int_T f` for every triangle.
    fn integrate<T, F>(&self, f: F) -> Vec<T>
    where
        T: Send + Default + Copy + std::ops::AddAssign + std::ops::Mul<f64, Output = T>,
        F: Fn(Point) -> T + Sync,
    {
        self.geometry
            .par_iter()
            .map(|g| {
                let mut s = T::default();
                for (b, &w) in self.rule.points.iter().zip(&self.rule.weights) {
                    s += f(g.point(b)) * (w * g.area);
                }
                s
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct M2(Mat2);

impl std::ops::AddAssign for M2 {
    fn add_assign(&mut self, o: M2) {
        for i in 0..2 {
            for j in 0..2 {
                self.0[i][j] += o.0[i][j];
            }
        }
    }
}

impl std::ops::Mul<f64> for M2 {
    type Output = M2;
    fn mul(self, s: f64) -> M2 {
        M2([[self.0[0][0] * s, self.0[0][1] * s], [self.0[1][0] * s, self.0[1][1] * s]])
    }
}

#[derive(Debug, Clone)]
pub struct CellSolutionB {
    pub level: u32,
    /// Zero-mean vertex values of `w^1`, `w^2`.
    pub w: [Vec<f64>; 2],
    pub b0: Mat2,
    /// Relative residual of the pinned linear systems.
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct CellSolutionA {
    pub level: u32,
    /// `curl_y N` per triangle (zero mean).
    pub sigma: Vec<f64>,
    pub a0: f64,
    /// `max_T |a_T (1 + sigma_T) - a0| / a0` with `a_T` the triangle average.
    pub residual: f64,
    pub iterations: usize,
}

fn check_positive(mesh: &CellMesh, avg: &[f64]) -> Result<(), HomogenizeError> {
    for (t, &v) in avg.iter().enumerate() {
        if !(v > 0.0) {
            let c = mesh.geometry[t].point(&[1.0 / 3.0; 3]);
            return Err(HomogenizeError::NonPositive { value: v, at: c });
        }
    }
    Ok(())
}

/// Cell problem for a matrix coefficient `B(y)`.
pub fn solve_cell_b_matrix(
    mesh: &CellMesh,
    b: &(dyn Fn(Point) -> Mat2 + Sync),
) -> Result<CellSolutionB, HomogenizeError> {
    let bt: Vec<Mat2> = mesh.integrate(|p| M2(b(p))).into_iter().map(|m| m.0).collect();
    let trace: Vec<f64> = bt.iter().zip(&mesh.geometry).map(|(m, g)| 0.5 * (m[0][0] + m[1][1]) / g.area).collect();
    check_positive(mesh, &trace)?;
    let nv = mesh.n_vertices;
    // unknowns: vertices 1..nv
    let mut trip = Vec::new();
    let mut rhs = [vec![0.0; nv - 1], vec![0.0; nv - 1]];
    for (t, (vs, g)) in mesh.triangles.iter().zip(&mesh.geometry).enumerate() {
        let m = &bt[t];
        let bg: Vec<Point> = g
            .grad
            .iter()
            .map(|d| [m[0][0] * d[0] + m[0][1] * d[1], m[1][0] * d[0] + m[1][1] * d[1]])
            .collect();
        for i in 0..3 {
            if vs[i] == 0 {
                continue;
            }
            let r = vs[i] - 1;
            for j in 0..3 {
                if vs[j] != 0 {
                    trip.push((r, vs[j] - 1, bg[j][0] * g.grad[i][0] + bg[j][1] * g.grad[i][1]));
                }
            }
            // -(B e_k) . grad v_i, with B e_k the k-th column
            for k in 0..2 {
                rhs[k][r] -= m[0][k] * g.grad[i][0] + m[1][k] * g.grad[i][1];
            }
        }
    }
    let kmat = csr_from_triplets(nv - 1, nv - 1, &trip);
    let solver = SpdSolver::auto(&kmat)?;
    let mut w = [vec![0.0; nv], vec![0.0; nv]];
    let mut residual = 0.0f64;
    for k in 0..2 {
        let mut x = rhs[k].clone();
        if solver.is_exact() {
            solver.solve_in_place(&mut x);
        } else {
            x.iter_mut().for_each(|v| *v = 0.0);
            let pre = |r: &[f64], z: &mut [f64]| {
                z.copy_from_slice(r);
                solver.solve_in_place(z);
            };
            pcg(&|v, out| csr_matvec(&kmat, v, out, 1.0, 0.0), &pre, &rhs[k], &mut x, 1e-13, 20_000)?;
        }
        let mut r = rhs[k].clone();
        csr_matvec(&kmat, &x, &mut r, 1.0, -1.0);
        let bn = norm(&rhs[k]);
        if bn > 0.0 {
            residual = residual.max(norm(&r) / bn);
        }
        w[k][1..].copy_from_slice(&x);
        // zero-mean representative; the P1 mean weights each vertex by a third of its triangles
        let mut mean = 0.0;
        for (vs, g) in mesh.triangles.iter().zip(&mesh.geometry) {
            mean += g.area / 3.0 * vs.iter().map(|&v| w[k][v]).sum::<f64>();
        }
        w[k].iter_mut().for_each(|v| *v -= mean);
    }
    let mut b0 = [[0.0; 2]; 2];
    for (t, (vs, g)) in mesh.triangles.iter().zip(&mesh.geometry).enumerate() {
        let m = &bt[t];
        let mut e = [[0.0; 2]; 2];
        for k in 0..2 {
            e[k][k] = 1.0;
            for i in 0..3 {
                e[k][0] += w[k][vs[i]] * g.grad[i][0];
                e[k][1] += w[k][vs[i]] * g.grad[i][1];
            }
        }
        for p in 0..2 {
            for q in 0..2 {
                let bq = [m[0][0] * e[q][0] + m[0][1] * e[q][1], m[1][0] * e[q][0] + m[1][1] * e[q][1]];
                b0[p][q] += e[p][0] * bq[0] + e[p][1] * bq[1];
            }
        }
    }
    let s = 0.5 * (b0[0][1] + b0[1][0]);
    b0[0][1] = s;
    b0[1][0] = s;
    Ok(CellSolutionB { level: mesh.level, w, b0, residual })
}

/// Cell problem for a scalar coefficient `b(y)` at frozen x.
pub fn solve_cell_b(mesh: &CellMesh, b: &(dyn Fn(Point) -> f64 + Sync)) -> Result<CellSolutionB, HomogenizeError> {
    solve_cell_b_matrix(mesh, &|p| {
        let v = b(p);
        [[v, 0.0], [0.0, v]]
    })
}

/// Cell problem for `a(y)` in the scalar-curl reduction.
pub fn solve_cell_a(mesh: &CellMesh, a: &(dyn Fn(Point) -> f64 + Sync)) -> Result<CellSolutionA, HomogenizeError> {
    let at: Vec<f64> = mesh.integrate(a);
    let avg: Vec<f64> = at.iter().zip(&mesh.geometry).map(|(v, g)| v / g.area).collect();
    check_positive(mesh, &avg)?;
    let h = &mesh.haar;
    let n = h.cols();
    let ht = crate::linalg::transpose(h);
    // M = H^T diag(A_T) H, rhs = -H^T A
    let apply = |c: &[f64], out: &mut [f64]| {
        let mut s = vec![0.0; h.rows()];
        csr_matvec(h, c, &mut s, 1.0, 0.0);
        s.iter_mut().zip(&at).for_each(|(x, a)| *x *= a);
        csr_matvec(&ht, &s, out, 1.0, 0.0);
    };
    let mut diag = vec![0.0; n];
    for (v, (t, j)) in h.iter() {
        diag[j] += v * v * at[t];
    }
    let mut rhs = vec![0.0; n];
    csr_matvec(&ht, &at, &mut rhs, -1.0, 0.0);
    let mut c = vec![0.0; n];
    let info = pcg(
        &apply,
        &|r, z| z.iter_mut().zip(r.iter().zip(&diag)).for_each(|(z, (r, d))| *z = r / d),
        &rhs,
        &mut c,
        1e-14,
        10_000,
    )?;
    let mut sigma = vec![0.0; h.rows()];
    csr_matvec(h, &c, &mut sigma, 1.0, 0.0);
    let a0: f64 = at.iter().zip(&sigma).map(|(a, s)| a * (1.0 + s) * (1.0 + s)).sum();
    let residual = avg.iter().zip(&sigma).map(|(a, s)| (a * (1.0 + s) - a0).abs() / a0).fold(0.0, f64::max);
    Ok(CellSolutionA { level: mesh.level, sigma, a0, residual, iterations: info.iterations })
}

/// Closed form of the discrete `a` cell problem: the harmonic mean of the
/// triangle averages of `a`.
pub fn discrete_harmonic_mean(mesh: &CellMesh, a: &(dyn Fn(Point) -> f64 + Sync)) -> f64 {
    let at: Vec<f64> = mesh.integrate(a);
    1.0 / at.iter().zip(&mesh.geometry).map(|(v, g)| g.area * g.area / v).sum::<f64>()
}

/// `b^0` for a coefficient with `n` nested micro scales, `b(ys)` with
/// `ys = [y_1, ..., y_n]` (macroscopic x frozen by the caller).
///
/// Each step solves the cell problem in `y_i` with the coefficient produced by
/// the step below it. The cost is the product of the cell-mesh sizes.
pub fn homogenize_recursive(
    b: &(dyn Fn(&[Point]) -> f64 + Sync),
    n: usize,
    mesh: &CellMesh,
) -> Result<Mat2, HomogenizeError> {
    if n == 0 {
        return Err(HomogenizeError::NoScales);
    }
    ladder(b, n, &[], mesh)
}

fn ladder(b: &(dyn Fn(&[Point]) -> f64 + Sync), n: usize, prefix: &[Point], mesh: &CellMesh) -> Result<Mat2, HomogenizeError> {
    let depth = prefix.len();
    if depth + 1 == n {
        return Ok(solve_cell_b(mesh, &|y| {
            let mut ys = prefix.to_vec();
            ys.push(y);
            b(&ys)
        })?
        .b0);
    }
    // b^{depth+1} at every quadrature point of this cell; errors are reported after the solve
    let failure: Mutex<Option<HomogenizeError>> = Mutex::new(None);
    let coeff = |y: Point| -> Mat2 {
        let mut ys = prefix.to_vec();
        ys.push(y);
        match ladder(b, n, &ys, mesh) {
            Ok(m) => m,
            Err(e) => {
                failure.lock().unwrap().get_or_insert(e);
                [[1.0, 0.0], [0.0, 1.0]]
            }
        }
    };
    let sol = solve_cell_b_matrix(mesh, &coeff)?;
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    Ok(sol.b0)
}

fn key(x: Point) -> (u64, u64) {
    (x[0].to_bits(), x[1].to_bits())
}

/// On-demand homogenized coefficients `a0(x)`, `b0(x)` with a per-point cache.
pub struct HomogenizedCoefficients {
    a: Coefficient,
    b: Coefficient,
    mesh: Arc<CellMesh>,
    cache_a: Mutex<HashMap<(u64, u64), f64>>,
    cache_b: Mutex<HashMap<(u64, u64), Mat2>>,
}

impl HomogenizedCoefficients {
    pub fn new(a: Coefficient, b: Coefficient, cell_level: u32) -> Result<Self, HomogenizeError> {
        Ok(HomogenizedCoefficients {
            a,
            b,
            mesh: Arc::new(CellMesh::new(cell_level)?),
            cache_a: Mutex::new(HashMap::new()),
            cache_b: Mutex::new(HashMap::new()),
        })
    }

    pub fn cell_level(&self) -> u32 {
        self.mesh.level
    }

    pub fn a0(&self, x: Point) -> Result<f64, HomogenizeError> {
        if let Some(&v) = self.cache_a.lock().unwrap().get(&key(x)) {
            return Ok(v);
        }
        let a = &self.a;
        let v = solve_cell_a(&self.mesh, &|y| a.eval(x, y))?.a0;
        Ok(*self.cache_a.lock().unwrap().entry(key(x)).or_insert(v))
    }

    pub fn b0(&self, x: Point) -> Result<Mat2, HomogenizeError> {
        if let Some(&v) = self.cache_b.lock().unwrap().get(&key(x)) {
            return Ok(v);
        }
        let b = &self.b;
        let v = solve_cell_b(&self.mesh, &|y| b.eval(x, y))?.b0;
        Ok(*self.cache_b.lock().unwrap().entry(key(x)).or_insert(v))
    }

    /// Evaluate both coefficients at many points in parallel.
    pub fn tabulate(&self, xs: &[Point]) -> Result<Vec<(f64, Mat2)>, HomogenizeError> {
        xs.par_iter().map(|&x| Ok((self.a0(x)?, self.b0(x)?))).collect()
    }
}

/// Observed convergence orders `log2(e_k / e_{k+1})` of successive errors.
pub fn observed_orders(errors: &[f64]) -> Vec<f64> {
    errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}

/// Relative error of a 2x2 matrix in the max norm.
pub fn mat_rel_error(m: &Mat2, exact: &Mat2) -> f64 {
    let d = (0..4).map(|k| (m[k / 2][k % 2] - exact[k / 2][k % 2]).abs()).fold(0.0, f64::max);
    let s = (0..4).map(|k| exact[k / 2][k % 2].abs()).fold(0.0, f64::max);
    d / s
}
