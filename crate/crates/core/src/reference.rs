//! Direct fine-mesh solver for the oscillating problem with
//! `a_eps(x) = a(x, x/eps)` and `b_eps(x) = b(x, x/eps)`: lowest-order edge
//! elements on a mesh that resolves the period, and the same time scheme as the
//! two-scale solver.

use std::sync::Arc;

use sprs::CsMat;
use thiserror::Error;

use crate::elements::{ElementError, LocalMatrices, TriangleGeometry, TriangleRule};
use crate::fields::Coefficient;
use crate::linalg::csr_from_triplets;
use crate::mesh2d::{MeshError, MeshHierarchy, MeshLevel, Point};
use crate::problems::Problem;
use crate::spaces::interior_index;
use crate::tensor::{BlockInfo, BlockKind, BlockOperator, KronTerm};
use crate::timestepper::{SolverSettings, StepError, TimeStepper, Trajectory};

#[derive(Debug, Error)]
pub enum ReferenceError {
    #[error("eps = {0} is not a negative power of two")]
    NotDyadic(f64),
    #[error("fine level {level} does not resolve eps = {eps}; need at least level {min_level}")]
    Unresolved { eps: f64, level: u32, min_level: u32 },
    #[error("fine level {level} exceeds the configured maximum {max}")]
    TooFine { level: u32, max: u32 },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Element(#[from] ElementError),
    #[error(transparent)]
    Step(#[from] StepError),
}

/// `log2(1/eps)` for dyadic `eps <= 1`.
pub fn dyadic_exponent(eps: f64) -> Result<u32, ReferenceError> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(ReferenceError::NotDyadic(eps));
    }
    let k = (1.0 / eps).log2().round();
    if (eps * k.exp2() - 1.0).abs() > 1e-14 || k > 30.0 {
        return Err(ReferenceError::NotDyadic(eps));
    }
    Ok(k as u32)
}

/// Oscillating coefficients on a resolving mesh.
#[derive(Debug, Clone)]
pub struct FineProblem {
    pub eps: f64,
    pub level: u32,
    pub a: Coefficient,
    pub b: Coefficient,
}

/// Smallest mesh level with four elements per period.
pub fn min_level(eps: f64) -> Result<u32, ReferenceError> {
    Ok(dyadic_exponent(eps)? + 2)
}

fn fract(p: Point) -> Point {
    [p[0] - p[0].floor(), p[1] - p[1].floor()]
}

impl FineProblem {
    pub fn new(eps: f64, level: u32, a: Coefficient, b: Coefficient) -> Result<Self, ReferenceError> {
        let min = min_level(eps)?;
        if level < min {
            return Err(ReferenceError::Unresolved { eps, level, min_level: min });
        }
        Ok(FineProblem { eps, level, a, b })
    }

    pub fn a_eps(&self, x: Point) -> f64 {
        self.a.eval(x, fract([x[0] / self.eps, x[1] / self.eps]))
    }

    pub fn b_eps(&self, x: Point) -> f64 {
        self.b.eval(x, fract([x[0] / self.eps, x[1] / self.eps]))
    }

    pub fn assemble(&self) -> Result<FineOperators, ReferenceError> {
        let meshes = MeshHierarchy::new(self.level, false)?;
        let mesh = meshes.levels.into_iter().last().expect("hierarchy has levels");
        let interior = interior_index(&mesh);
        let n = interior.iter().flatten().count();
        let rule = TriangleRule::degree5();
        let mut mt = Vec::new();
        let mut kt = Vec::new();
        let mut geometry = Vec::with_capacity(mesh.n_triangles());
        for t in 0..mesh.n_triangles() {
            let g = TriangleGeometry::new(mesh.triangle_points(t))?;
            let te = mesh.tri_edges[t];
            let signs = [te[0].1, te[1].1, te[2].1];
            let m = LocalMatrices::edge_mass(&g, &signs, &rule, &|x| self.b_eps(x));
            let k = LocalMatrices::edge_curlcurl(&g, &signs, &rule, &|x| self.a_eps(x));
            for i in 0..3 {
                let Some(ei) = interior[te[i].0] else { continue };
                for j in 0..3 {
                    if let Some(ej) = interior[te[j].0] {
                        mt.push((ei, ej, m[i][j]));
                        kt.push((ei, ej, k[i][j]));
                    }
                }
            }
            geometry.push(g);
        }
        Ok(FineOperators {
            mass: csr_from_triplets(n, n, &mt),
            curlcurl: csr_from_triplets(n, n, &kt),
            mesh: Arc::new(mesh),
            interior,
            geometry,
        })
    }
}

/// Assembled fine-scale matrices and the mesh they live on.
pub struct FineOperators {
    pub mesh: Arc<MeshLevel>,
    pub interior: Vec<Option<usize>>,
    pub geometry: Vec<TriangleGeometry>,
    /// `int b_eps w_i . w_j`.
    pub mass: CsMat<f64>,
    /// `int a_eps curl w_i curl w_j`.
    pub curlcurl: CsMat<f64>,
}

fn single_block(m: &CsMat<f64>) -> BlockOperator {
    let info = BlockInfo { kind: BlockKind::U0, macro_level: 0, micro_level: 0, dim_x: m.rows(), dim_y: 1, offset: 0 };
    let mut op = BlockOperator::zero(vec![info]);
    op.push(0, 0, KronTerm::new(m.clone(), csr_from_triplets(1, 1, &[(0, 0, 1.0)])));
    op
}

impl FineOperators {
    pub fn dim(&self) -> usize {
        self.mass.rows()
    }

    fn signs(&self, t: usize) -> [f64; 3] {
        let te = self.mesh.tri_edges[t];
        [te[0].1, te[1].1, te[2].1]
    }

    /// `int f . w_i` with a degree-5 rule.
    pub fn load(&self, f: &dyn Fn(Point) -> Point) -> Vec<f64> {
        let rule = TriangleRule::degree5();
        let mut out = vec![0.0; self.dim()];
        for (t, g) in self.geometry.iter().enumerate() {
            let te = self.mesh.tri_edges[t];
            let signs = self.signs(t);
            for (b, &wq) in rule.points.iter().zip(&rule.weights) {
                let fv = f(g.point(b));
                let w = g.whitney(b, &signs);
                for i in 0..3 {
                    if let Some(e) = self.interior[te[i].0] {
                        out[e] += wq * g.area * (fv[0] * w[i][0] + fv[1] * w[i][1]);
                    }
                }
            }
        }
        out
    }

    pub fn interpolate(&self, f: &dyn Fn(Point) -> Point) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (e, idx) in self.interior.iter().enumerate() {
            if let Some(i) = idx {
                let (s, d) = self.mesh.edge_geometry(e);
                out[*i] = crate::elements::edge_circulation(f, s, d, 3);
            }
        }
        out
    }

    /// Piecewise-constant curl of a coefficient vector, per triangle.
    pub fn curls(&self, x: &[f64]) -> Vec<f64> {
        (0..self.geometry.len())
            .map(|t| {
                let te = self.mesh.tri_edges[t];
                let c = self.geometry[t].whitney_curl(&self.signs(t));
                (0..3).map(|i| self.interior[te[i].0].map_or(0.0, |e| c[i] * x[e])).sum()
            })
            .collect()
    }

    /// Field value on triangle `t` at barycentric point `b`.
    pub fn field(&self, x: &[f64], t: usize, b: &[f64; 3]) -> Point {
        let te = self.mesh.tri_edges[t];
        let w = self.geometry[t].whitney(b, &self.signs(t));
        let mut v = [0.0; 2];
        for i in 0..3 {
            if let Some(e) = self.interior[te[i].0] {
                v[0] += x[e] * w[i][0];
                v[1] += x[e] * w[i][1];
            }
        }
        v
    }

    pub fn stepper(&self, dt: f64, settings: SolverSettings) -> Result<TimeStepper, StepError> {
        TimeStepper::new(&single_block(&self.mass), &single_block(&self.curlcurl), dt, settings)
    }
}

/// Solve the oscillating problem with the data of `problem` for `steps` steps of size `dt`.
pub fn solve_fine(
    problem: &Problem,
    fine: &FineProblem,
    dt: f64,
    steps: usize,
    settings: SolverSettings,
) -> Result<(FineOperators, Trajectory), ReferenceError> {
    let ops = fine.assemble()?;
    let ts = ops.stepper(dt, settings)?;
    let c0 = ops.interpolate(&*problem.g0);
    let v0 = ops.interpolate(&*problem.g1);
    let f = problem.f.clone();
    let load = |t: f64| ops.load(&|x| f(t, x));
    let traj = ts.run(&c0, &v0, &load, steps)?;
    Ok((ops, traj))
}
