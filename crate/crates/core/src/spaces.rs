//! One-scale factor spaces and their multilevel bases.
//!
//! Every basis carries a sparse synthesis matrix that maps its coefficients to
//! the coefficients of the corresponding full space on a finer reference
//! level: nodal values for the continuous spaces, edge circulations for the
//! edge spaces and triangle values for the piecewise constants.
//!
//! The x-factor nodal space on D is the tensor product of 1D P1 spaces, i.e.
//! Q1 on the square grid underlying the triangle mesh.

use std::collections::HashMap;

use sprs::{CsMat, TriMat};
use thiserror::Error;

use crate::elements::TriangleGeometry;
use crate::mesh2d::{MeshError, MeshHierarchy, LOCAL_EDGES};

#[derive(Debug, Error)]
pub enum SpaceError {
    #[error("basis level {level} exceeds reference level {reference}")]
    LevelAboveReference { level: u32, reference: u32 },
    #[error("{kind:?} needs a {} mesh hierarchy", if *.periodic { "periodic" } else { "non-periodic" })]
    WrongMesh { kind: FactorKind, periodic: bool },
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FactorKind {
    /// Q1 nodal functions on D (full space of the level, boundary nodes included).
    NodalD,
    /// Q1 functions on D spanning the detail between levels `l-1` and `l`.
    DetailNodalD,
    /// P1 on the periodic triangle mesh modulo constants (vertex 0 dropped).
    NodalPeriodic,
    /// Periodic Q1 detail functions, tensorized from the 1D periodic hierarchy
    /// (which omits constants, so level 0 is empty).
    DetailNodalPeriodic,
    /// Whitney edge functions on D with vanishing tangential trace.
    EdgeD,
    /// Whitney edge functions on the periodic mesh.
    EdgePeriodic,
    /// Zero-mean piecewise constants, orthonormal Haar basis of levels `0..=l`.
    PconstZeroMeanPeriodic,
    /// Haar functions of level `l` only.
    DetailPconstPeriodic,
    /// The constant function on Y, stored as triangle values.
    Constant,
}

impl FactorKind {
    fn periodic(self) -> bool {
        !matches!(self, FactorKind::NodalD | FactorKind::DetailNodalD | FactorKind::EdgeD)
    }
}

/// A basis of a factor space at `level`, expressed on `reference_level`.
#[derive(Debug, Clone)]
pub struct FactorBasis {
    pub kind: FactorKind,
    pub level: u32,
    pub reference_level: u32,
    pub dim: usize,
    /// Rows: reference-level coefficients. Columns: this basis. CSR.
    pub synthesis: CsMat<f64>,
}

/// Nodal values of a 1D function on the uniform grid of a given level.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid1d {
    pub level: u32,
    pub values: Vec<f64>,
}

fn grid_nodes(level: u32, periodic: bool) -> usize {
    let n = 1usize << level;
    if periodic {
        n
    } else {
        n + 1
    }
}

impl Grid1d {
    /// Linear interpolation onto a finer level.
    pub fn prolong(&self, to: u32, periodic: bool) -> Grid1d {
        assert!(to >= self.level);
        let mut v = self.values.clone();
        for l in self.level..to {
            let nf = grid_nodes(l + 1, periodic);
            let mut w = vec![0.0; nf];
            let nc = v.len();
            for i in 0..nf {
                w[i] = if i % 2 == 0 {
                    v[i / 2]
                } else {
                    let a = i / 2;
                    let b = if periodic { (a + 1) % nc } else { a + 1 };
                    0.5 * (v[a] + v[b])
                };
            }
            v = w;
        }
        Grid1d { level: to, values: v }
    }
}

/// The 1D wavelet levels `0..=level`; level `j` lives on the grid of width `2^-(j+1)`.
///
/// Level 0 has the three hats of that grid (only the hat at 0 when periodic,
/// together with the hat at 1). Level `j >= 1` has `2^j` functions built from
/// the stencil `(-1, 2, -1)` with one-sided variants at the boundary, scaled by
/// `2^(j/2)`.
pub fn build_wavelet_basis_1d(level: u32, periodic: bool) -> Vec<Vec<Grid1d>> {
    let mut out = Vec::new();
    for j in 0..=level {
        let gl = j + 1;
        let nn = grid_nodes(gl, periodic);
        let mut fns = Vec::new();
        let put = |pairs: &[(i64, f64)], scale: f64| -> Grid1d {
            let mut v = vec![0.0; nn];
            for &(i, x) in pairs {
                let i = if periodic { i.rem_euclid(nn as i64) } else { i } as usize;
                v[i] += scale * x;
            }
            Grid1d { level: gl, values: v }
        };
        if j == 0 {
            if periodic {
                // (1, 0, 1) at (0, 1/2, 1): the hat at the identified endpoint
                fns.push(put(&[(0, 1.0)], 1.0));
            } else {
                fns.push(put(&[(0, 1.0)], 1.0));
                fns.push(put(&[(1, 1.0)], 1.0));
                fns.push(put(&[(2, 1.0)], 1.0));
            }
        } else {
            let s = 2f64.powf(j as f64 / 2.0);
            let n = 1i64 << j;
            let last = 2 * n; // index of x = 1
            if periodic {
                fns.push(put(&[(0, 0.0), (1, 2.0), (2, -1.0)], s));
            } else {
                fns.push(put(&[(0, -2.0), (1, 2.0), (2, -1.0)], s));
            }
            for k in 2..n {
                let c = 2 * k - 1;
                fns.push(put(&[(c - 1, -1.0), (c, 2.0), (c + 1, -1.0)], s));
            }
            if periodic {
                fns.push(put(&[(last - 2, -1.0), (last - 1, 2.0)], s));
            } else {
                fns.push(put(&[(last - 2, -1.0), (last - 1, 2.0), (last, -2.0)], s));
            }
        }
        out.push(fns);
    }
    out
}

/// Mesh-aligned 1D detail functions: level `l` lives on the grid of width `2^-l`
/// and levels `0..=l` together span P1 on that grid (modulo constants when
/// periodic).
pub fn detail_1d(l: u32, periodic: bool) -> Vec<Grid1d> {
    match (l, periodic) {
        (0, false) => vec![
            Grid1d { level: 0, values: vec![1.0, 0.0] },
            Grid1d { level: 0, values: vec![0.0, 1.0] },
        ],
        // the periodic hierarchy spans P1 modulo constants
        (0, true) => Vec::new(),
        (1, false) => vec![Grid1d { level: 1, values: vec![0.0, 1.0, 0.0] }],
        (1, true) => vec![Grid1d { level: 1, values: vec![1.0, 0.0] }],
        (l, p) => build_wavelet_basis_1d(l - 1, p).pop().unwrap(),
    }
}

/// Number of detail functions `detail_1d(l, periodic).len()`.
pub fn detail_1d_dim(l: u32, periodic: bool) -> usize {
    match (l, periodic) {
        (0, false) => 2,
        (0, true) => 0,
        (l, _) => 1usize << (l - 1),
    }
}

/// Dimension of a factor basis without building it.
pub fn factor_dim(kind: FactorKind, level: u32) -> usize {
    let n = 1usize << level;
    match kind {
        FactorKind::NodalD => (n + 1) * (n + 1),
        FactorKind::DetailNodalD | FactorKind::DetailNodalPeriodic => {
            let p = kind == FactorKind::DetailNodalPeriodic;
            let full = |l: u32| -> usize {
                let k: usize = (0..=l).map(|j| detail_1d_dim(j, p)).sum();
                k * k
            };
            if level == 0 {
                full(0)
            } else {
                full(level) - full(level - 1)
            }
        }
        FactorKind::NodalPeriodic => n * n - 1,
        FactorKind::EdgeD => 3 * n * n - 2 * n,
        FactorKind::EdgePeriodic => 3 * n * n,
        FactorKind::PconstZeroMeanPeriodic => 2 * n * n - 1,
        FactorKind::DetailPconstPeriodic => {
            if level == 0 {
                1
            } else {
                6 * (n / 2) * (n / 2)
            }
        }
        FactorKind::Constant => 1,
    }
}

fn csr(rows: usize, cols: usize, trip: &[(usize, usize, f64)]) -> CsMat<f64> {
    let mut t = TriMat::with_capacity((rows, cols), trip.len());
    for &(i, j, v) in trip {
        if v != 0.0 {
            t.add_triplet(i, j, v);
        }
    }
    t.to_csr()
}

impl FactorBasis {
    /// Build the basis; `meshes` must reach `reference_level` and match the
    /// periodicity of `kind` (Q1 kinds only use it for that check).
    pub fn new(
        kind: FactorKind,
        level: u32,
        reference_level: u32,
        meshes: &MeshHierarchy,
    ) -> Result<Self, SpaceError> {
        if level > reference_level {
            return Err(SpaceError::LevelAboveReference { level, reference: reference_level });
        }
        if meshes.periodic != kind.periodic() {
            return Err(SpaceError::WrongMesh { kind, periodic: kind.periodic() });
        }
        let r = reference_level;
        let synthesis = match kind {
            FactorKind::NodalD => q1_prolongation(level, r, false),
            FactorKind::DetailNodalD => q1_detail(level, r, false),
            FactorKind::DetailNodalPeriodic => q1_detail(level, r, true),
            FactorKind::NodalPeriodic => {
                let p = p1_prolongation(meshes, level, r)?;
                // drop the column of vertex 0
                let nv = meshes.level(r)?.n_vertices();
                let mut trip = Vec::new();
                for (v, row) in p.outer_iterator().enumerate() {
                    for (c, &x) in row.iter() {
                        if c > 0 {
                            trip.push((v, c - 1, x));
                        }
                    }
                }
                csr(nv, p.cols() - 1, &trip)
            }
            FactorKind::EdgeD | FactorKind::EdgePeriodic => edge_prolongation(meshes, level, r)?,
            FactorKind::PconstZeroMeanPeriodic => {
                let mut trip = Vec::new();
                let mut col = 0;
                for j in 0..=level {
                    col += haar_level(meshes, j, r, col, &mut trip)?;
                }
                csr(meshes.level(r)?.n_triangles(), col, &trip)
            }
            FactorKind::DetailPconstPeriodic => {
                let mut trip = Vec::new();
                let n = haar_level(meshes, level, r, 0, &mut trip)?;
                csr(meshes.level(r)?.n_triangles(), n, &trip)
            }
            FactorKind::Constant => {
                let nt = meshes.level(r)?.n_triangles();
                let trip: Vec<_> = (0..nt).map(|t| (t, 0, 1.0)).collect();
                csr(nt, 1, &trip)
            }
        };
        let dim = synthesis.cols();
        debug_assert_eq!(dim, factor_dim(kind, level));
        Ok(FactorBasis { kind, level, reference_level, dim, synthesis })
    }
}

/// 1D P1 prolongation from level `from` to `to` as a dense-by-column list.
fn p1_1d_matrix(from: u32, to: u32, periodic: bool) -> Vec<Vec<(usize, f64)>> {
    let nc = grid_nodes(from, periodic);
    (0..nc)
        .map(|c| {
            let mut v = vec![0.0; nc];
            v[c] = 1.0;
            let g = Grid1d { level: from, values: v }.prolong(to, periodic);
            g.values.iter().enumerate().filter(|(_, &x)| x != 0.0).map(|(i, &x)| (i, x)).collect()
        })
        .collect()
}

/// Tensor Q1 prolongation; node (i, j) has index `j * n1 + i`.
pub fn q1_prolongation(from: u32, to: u32, periodic: bool) -> CsMat<f64> {
    let cols = p1_1d_matrix(from, to, periodic);
    let nf = grid_nodes(to, periodic);
    let nc = grid_nodes(from, periodic);
    let mut trip = Vec::new();
    for (cj, fj) in cols.iter().enumerate() {
        for (ci, fi) in cols.iter().enumerate() {
            for &(j, y) in fj {
                for &(i, x) in fi {
                    trip.push((j * nf + i, cj * nc + ci, x * y));
                }
            }
        }
    }
    csr(nf * nf, nc * nc, &trip)
}

fn q1_detail(level: u32, to: u32, periodic: bool) -> CsMat<f64> {
    let nf = grid_nodes(to, periodic);
    let mut trip = Vec::new();
    let mut col = 0;
    // pairs (j1, j2) with max(j1, j2) = level, lexicographic
    for j1 in 0..=level {
        for j2 in 0..=level {
            if j1.max(j2) != level {
                continue;
            }
            let f1: Vec<Grid1d> = detail_1d(j1, periodic).iter().map(|g| g.prolong(to, periodic)).collect();
            let f2: Vec<Grid1d> = detail_1d(j2, periodic).iter().map(|g| g.prolong(to, periodic)).collect();
            for a in &f1 {
                for b in &f2 {
                    for (j, &y) in b.values.iter().enumerate() {
                        if y == 0.0 {
                            continue;
                        }
                        for (i, &x) in a.values.iter().enumerate() {
                            if x != 0.0 {
                                trip.push((j * nf + i, col, x * y));
                            }
                        }
                    }
                    col += 1;
                }
            }
        }
    }
    csr(nf * nf, col, &trip)
}

/// P1 prolongation on a triangle hierarchy (all vertices).
pub fn p1_prolongation(meshes: &MeshHierarchy, from: u32, to: u32) -> Result<CsMat<f64>, SpaceError> {
    let coarse = meshes.level(from)?;
    let fine = meshes.level(to)?;
    let mut seen = vec![false; fine.n_vertices()];
    let mut trip = Vec::new();
    for t in 0..fine.n_triangles() {
        let tc = meshes.ancestor(to, t, from);
        let g = TriangleGeometry::new(coarse.triangle_points(tc)).expect("mesh triangles are regular");
        let fp = fine.triangle_points(t);
        for k in 0..3 {
            let v = fine.triangles[t][k];
            if seen[v] {
                continue;
            }
            seen[v] = true;
            let b = g.barycentric(fp[k]);
            let mut acc: HashMap<usize, f64> = HashMap::new();
            for i in 0..3 {
                *acc.entry(coarse.triangles[tc][i]).or_insert(0.0) += b[i];
            }
            let mut acc: Vec<_> = acc.into_iter().collect();
            acc.sort_by_key(|p| p.0);
            for (c, x) in acc {
                if x.abs() > 1e-14 {
                    trip.push((v, c, x));
                }
            }
        }
    }
    Ok(csr(fine.n_vertices(), coarse.n_vertices(), &trip))
}

/// Whitney prolongation: circulations of coarse edge functions along fine edges.
/// Restricted to interior edges on non-periodic meshes.
pub fn edge_prolongation(meshes: &MeshHierarchy, from: u32, to: u32) -> Result<CsMat<f64>, SpaceError> {
    let coarse = meshes.level(from)?;
    let fine = meshes.level(to)?;
    let cmap = interior_index(coarse);
    let fmap = interior_index(fine);
    let nci = cmap.iter().filter(|x| x.is_some()).count();
    let nfi = fmap.iter().filter(|x| x.is_some()).count();
    let mut seen = vec![false; fine.n_edges()];
    let mut trip = Vec::new();
    for t in 0..fine.n_triangles() {
        let tc = meshes.ancestor(to, t, from);
        let g = TriangleGeometry::new(coarse.triangle_points(tc)).expect("mesh triangles are regular");
        let fp = fine.triangle_points(t);
        for (k, &(a, b)) in LOCAL_EDGES.iter().enumerate() {
            let (e, s) = fine.tri_edges[t][k];
            if seen[e] {
                continue;
            }
            seen[e] = true;
            let Some(fe) = fmap[e] else { continue };
            let tan = [s * (fp[b][0] - fp[a][0]), s * (fp[b][1] - fp[a][1])];
            let mid = [0.5 * (fp[a][0] + fp[b][0]), 0.5 * (fp[a][1] + fp[b][1])];
            let bary = g.barycentric(mid);
            let ones = [1.0; 3];
            let w = g.whitney(&bary, &ones);
            let mut acc: HashMap<usize, f64> = HashMap::new();
            for kc in 0..3 {
                let (ec, sc) = coarse.tri_edges[tc][kc];
                if let Some(ce) = cmap[ec] {
                    *acc.entry(ce).or_insert(0.0) += sc * (w[kc][0] * tan[0] + w[kc][1] * tan[1]);
                }
            }
            let mut acc: Vec<_> = acc.into_iter().collect();
            acc.sort_by_key(|p| p.0);
            for (c, x) in acc {
                if x.abs() > 1e-14 {
                    trip.push((fe, c, x));
                }
            }
        }
    }
    Ok(csr(nfi, nci, &trip))
}

/// Position of each edge among the interior edges.
pub fn interior_index(mesh: &crate::mesh2d::MeshLevel) -> Vec<Option<usize>> {
    let mut k = 0;
    mesh.boundary_edge
        .iter()
        .map(|&b| {
            if b {
                None
            } else {
                k += 1;
                Some(k - 1)
            }
        })
        .collect()
}

const WALSH: [[f64; 4]; 3] = [[1.0, 1.0, -1.0, -1.0], [1.0, -1.0, 1.0, -1.0], [1.0, -1.0, -1.0, 1.0]];

/// Append Haar functions of level `j` as triangle values at level `r`, starting at column `col0`.
fn haar_level(
    meshes: &MeshHierarchy,
    j: u32,
    r: u32,
    col0: usize,
    trip: &mut Vec<(usize, usize, f64)>,
) -> Result<usize, SpaceError> {
    let fine = meshes.level(r)?;
    if j == 0 {
        for t in 0..fine.n_triangles() {
            let a = meshes.ancestor(r, t, 0);
            trip.push((t, col0, if a == 0 { 1.0 } else { -1.0 }));
        }
        return Ok(1);
    }
    let parents = meshes.level(j - 1)?.n_triangles();
    let parent_area = meshes.level(j - 1)?.triangle_area();
    let s = 1.0 / parent_area.sqrt();
    for t in 0..fine.n_triangles() {
        let a = meshes.ancestor(r, t, j);
        let (p, c) = (a / 4, a % 4);
        for (w, pattern) in WALSH.iter().enumerate() {
            trip.push((t, col0 + 3 * p + w, s * pattern[c]));
        }
    }
    Ok(3 * parents)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::to_dense;

    #[test]
    fn wavelet_level_sizes() {
        let np: Vec<usize> = build_wavelet_basis_1d(2, false).iter().map(|l| l.len()).collect();
        let p: Vec<usize> = build_wavelet_basis_1d(2, true).iter().map(|l| l.len()).collect();
        assert_eq!(np, vec![3, 2, 4]);
        assert_eq!(p, vec![1, 2, 4]);
    }

    #[test]
    fn wavelets_at_level_one() {
        let w = build_wavelet_basis_1d(1, false);
        let s = 2f64.sqrt();
        assert_eq!(w[1][0].values, vec![-2.0 * s, 2.0 * s, -s, 0.0, 0.0]);
        assert_eq!(w[1][1].values, vec![0.0, 0.0, -s, 2.0 * s, -2.0 * s]);
    }

    fn gram_1d(fns: &[Grid1d], level: u32, periodic: bool) -> nalgebra::DMatrix<f64> {
        // exact P1 mass on the uniform grid
        let n = grid_nodes(level, periodic);
        let h = 0.5f64.powi(level as i32);
        let cols: Vec<Vec<f64>> = fns.iter().map(|f| f.prolong(level, periodic).values).collect();
        let mass = |u: &[f64], v: &[f64]| -> f64 {
            let cells = if periodic { n } else { n - 1 };
            (0..cells)
                .map(|i| {
                    let j = (i + 1) % n;
                    h / 6.0 * (2.0 * u[i] * v[i] + u[i] * v[j] + u[j] * v[i] + 2.0 * u[j] * v[j])
                })
                .sum()
        };
        nalgebra::DMatrix::from_fn(cols.len(), cols.len(), |i, j| mass(&cols[i], &cols[j]))
    }

    fn condition(g: &nalgebra::DMatrix<f64>) -> f64 {
        let e = g.clone().symmetric_eigen().eigenvalues;
        e.max() / e.min()
    }

    #[test]
    fn multilevel_bases_span_the_fine_space_stably() {
        for periodic in [false, true] {
            let mut conds = Vec::new();
            for level in 2..=7u32 {
                let fns: Vec<Grid1d> = (0..=level).flat_map(|l| detail_1d(l, periodic)).collect();
                assert_eq!(fns.len(), grid_nodes(level, periodic) - usize::from(periodic));
                conds.push(condition(&gram_1d(&fns, level, periodic)));
            }
            // bounded Riesz constants: the condition number settles
            assert!(conds.iter().all(|c| c.is_finite()));
            let last = conds[conds.len() - 1];
            let prev = conds[conds.len() - 2];
            assert!(last < 1.1 * prev, "{periodic}: {conds:?}");
            assert!(last < 50.0, "{periodic}: {conds:?}");
        }
    }

    fn meshes(l: u32, periodic: bool) -> MeshHierarchy {
        MeshHierarchy::new(l, periodic).unwrap()
    }

    #[test]
    fn factor_dims_match_construction() {
        let d = meshes(4, false);
        let y = meshes(4, true);
        for l in 0..=3 {
            for kind in [FactorKind::NodalD, FactorKind::DetailNodalD, FactorKind::EdgeD] {
                assert_eq!(FactorBasis::new(kind, l, 4, &d).unwrap().dim, factor_dim(kind, l));
            }
            for kind in [
                FactorKind::NodalPeriodic,
                FactorKind::DetailNodalPeriodic,
                FactorKind::EdgePeriodic,
                FactorKind::PconstZeroMeanPeriodic,
                FactorKind::DetailPconstPeriodic,
                FactorKind::Constant,
            ] {
                assert_eq!(FactorBasis::new(kind, l, 4, &y).unwrap().dim, factor_dim(kind, l));
            }
        }
        assert!(FactorBasis::new(FactorKind::EdgeD, 5, 4, &d).is_err());
        assert!(FactorBasis::new(FactorKind::EdgeD, 1, 4, &y).is_err());
    }

    #[test]
    fn detail_levels_together_span_the_full_q1_space() {
        let d = meshes(3, false);
        for l in 0..=3u32 {
            let mut cols = Vec::new();
            for j in 0..=l {
                let s = to_dense(&FactorBasis::new(FactorKind::DetailNodalD, j, 3, &d).unwrap().synthesis);
                cols.extend(s.column_iter().map(|c| c.clone_owned()));
            }
            let m = nalgebra::DMatrix::from_columns(&cols);
            let full = to_dense(&FactorBasis::new(FactorKind::NodalD, l, 3, &d).unwrap().synthesis);
            assert_eq!(m.ncols(), full.ncols());
            assert_eq!(m.clone().svd(false, false).rank(1e-10), m.ncols());
            // same column span: stacking does not raise the rank
            let both = nalgebra::DMatrix::from_columns(
                &m.column_iter().chain(full.column_iter()).map(|c| c.clone_owned()).collect::<Vec<_>>(),
            );
            assert_eq!(both.svd(false, false).rank(1e-10), m.ncols());
        }
    }

    #[test]
    fn nodal_prolongation_reproduces_linear_functions() {
        let y = meshes(4, false);
        let p = p1_prolongation(&y, 1, 4).unwrap();
        let c = y.level(1).unwrap();
        let f = y.level(4).unwrap();
        let lin = |x: [f64; 2]| 0.3 + 2.0 * x[0] - 1.5 * x[1];
        let cv: Vec<f64> = (0..c.n_vertices()).map(|v| lin(c.vertex_point(v))).collect();
        let mut fv = vec![0.0; f.n_vertices()];
        crate::linalg::csr_matvec(&p, &cv, &mut fv, 1.0, 0.0);
        for v in 0..f.n_vertices() {
            assert!((fv[v] - lin(f.vertex_point(v))).abs() < 1e-13);
        }
    }

    #[test]
    fn edge_prolongation_commutes_with_gradient() {
        for periodic in [false, true] {
            let h = meshes(3, periodic);
            for from in 0..3 {
                let pe = to_dense(&edge_prolongation(&h, from, 3).unwrap());
                let pn = to_dense(&p1_prolongation(&h, from, 3).unwrap());
                let grad = |m: &crate::mesh2d::MeshLevel| {
                    let idx = interior_index(m);
                    let ni = idx.iter().flatten().count();
                    let mut g = nalgebra::DMatrix::zeros(ni, m.n_vertices());
                    for e in 0..m.n_edges() {
                        if let Some(i) = idx[e] {
                            g[(i, m.edges[e][1])] += 1.0;
                            g[(i, m.edges[e][0])] -= 1.0;
                        }
                    }
                    g
                };
                let gc = grad(h.level(from).unwrap());
                let gf = grad(h.level(3).unwrap());
                let mut d = &pe * &gc - &gf * &pn;
                if !periodic {
                    // only potentials vanishing on the boundary map into the interior edges
                    let c = h.level(from).unwrap();
                    for v in 0..c.n_vertices() {
                        let [x, y] = c.vertices[v];
                        let n = 1i64 << from;
                        if x == 0 || y == 0 || x == n || y == n {
                            d.column_mut(v).fill(0.0);
                        }
                    }
                }
                assert!(d.amax() < 1e-12, "periodic={periodic} from={from}: {}", d.amax());
            }
        }
    }

    #[test]
    fn edge_prolongation_preserves_constant_fields() {
        let h = meshes(3, true);
        let c = h.level(1).unwrap();
        let f = h.level(3).unwrap();
        let u = |_: [f64; 2]| [0.7, -0.4];
        let interp = |m: &crate::mesh2d::MeshLevel| -> Vec<f64> {
            let idx = interior_index(m);
            (0..m.n_edges())
                .filter(|&e| idx[e].is_some())
                .map(|e| {
                    let (s, d) = m.edge_geometry(e);
                    crate::elements::edge_circulation(&u, s, d, 2)
                })
                .collect()
        };
        let p = edge_prolongation(&h, 1, 3).unwrap();
        let mut fv = vec![0.0; p.rows()];
        crate::linalg::csr_matvec(&p, &interp(c), &mut fv, 1.0, 0.0);
        let want = interp(f);
        for (a, b) in fv.iter().zip(&want) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn haar_basis_is_orthonormal_and_zero_mean() {
        let y = meshes(4, true);
        let b = FactorBasis::new(FactorKind::PconstZeroMeanPeriodic, 3, 4, &y).unwrap();
        let area = y.level(4).unwrap().triangle_area();
        let s = to_dense(&b.synthesis);
        let g = s.transpose() * &s * area;
        assert!((g - nalgebra::DMatrix::identity(b.dim, b.dim)).amax() < 1e-12);
        for c in s.column_iter() {
            assert!(c.sum().abs() < 1e-10);
        }
    }

    #[test]
    fn pinned_periodic_nodal_basis_drops_vertex_zero() {
        let y = meshes(2, true);
        let b = FactorBasis::new(FactorKind::NodalPeriodic, 2, 2, &y).unwrap();
        assert_eq!(b.dim, 15);
        let s = to_dense(&b.synthesis);
        assert!(s.row(0).amax() == 0.0);
        assert!(FactorBasis::new(FactorKind::NodalPeriodic, 0, 2, &y).unwrap().dim == 0);
    }
}
