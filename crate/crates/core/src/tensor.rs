//! Full and sparse tensor-product spaces for the two-scale problem, their block
//! layout and matrix-free Kronecker-structured operators.
//!
//! Unknowns are ordered as `[C0 | sigma blocks | frak blocks]`:
//! * `C0`: Whitney coefficients of `u0` on D (interior edges at level L);
//! * `sigma`: coefficients of `curl_y u1` in (x-detail level l) x (zero-mean
//!   piecewise constants on Y at micro level m);
//! * `frak`: coefficients of the scalar potential in (x-detail level l) x
//!   (periodic P1 modulo constants at micro level m).
//!
//! The sparse space uses `m = L - l`, the full space `m = L`. Within a block,
//! coefficients are stored row-major, `index = p * dim_y + q`.

use std::sync::Arc;

use nalgebra::DMatrix;
use sprs::CsMat;
use thiserror::Error;

use crate::elements::{ElementError, TriangleGeometry, TriangleRule};
use crate::fields::{Coefficient, ScalarFn, SeparableField, SeparableVector};
use crate::linalg::{self, csr_from_triplets, csr_matvec, SolveError, SpdSolver};
use crate::mesh2d::{MeshError, MeshHierarchy, MeshLevel, Point};
use crate::spaces::{factor_dim, interior_index, FactorBasis, FactorKind, SpaceError};

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("coefficient `{0}` is not separable; tensor assembly needs sum-of-products coefficients")]
    NonSeparable(&'static str),
    #[error("coefficient `{0}` has no terms")]
    EmptyCoefficient(&'static str),
    #[error("only one micro scale is supported by the operator assembly (got {0})")]
    UnsupportedScales(usize),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Element(#[from] ElementError),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Full,
    Sparse,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::Sparse => "sparse",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(Mode::Full),
            "sparse" => Ok(Mode::Sparse),
            _ => Err(format!("unknown mode `{s}` (expected full or sparse)")),
        }
    }
}

/// Level multi-indices `(l_0, ..., l_n)` of the detail-space decomposition.
///
/// Sparse: `sum l_i <= L`; full: `max l_i <= L`. Ordered by total level, then
/// lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseIndexSet {
    pub n: usize,
    pub max_level: u32,
    pub mode: Mode,
    pub entries: Vec<Vec<u32>>,
}

impl SparseIndexSet {
    pub fn new(n: usize, max_level: u32, mode: Mode) -> Self {
        let mut entries = Vec::new();
        let mut cur = vec![0u32; n + 1];
        loop {
            let ok = match mode {
                Mode::Sparse => cur.iter().sum::<u32>() <= max_level,
                Mode::Full => true,
            };
            if ok {
                entries.push(cur.clone());
            }
            // odometer over [0, L]^{n+1}
            let mut k = n + 1;
            loop {
                if k == 0 {
                    entries.sort_by(|a, b| {
                        let sa: u32 = a.iter().sum();
                        let sb: u32 = b.iter().sum();
                        sa.cmp(&sb).then_with(|| a.cmp(b))
                    });
                    return SparseIndexSet { n, max_level, mode, entries };
                }
                k -= 1;
                if cur[k] < max_level {
                    cur[k] += 1;
                    break;
                }
                cur[k] = 0;
            }
        }
    }

    /// Macro prefixes with the largest admissible micro level for each.
    pub fn blocks(&self) -> Vec<(Vec<u32>, u32)> {
        let mut out: Vec<(Vec<u32>, u32)> = Vec::new();
        for e in &self.entries {
            let (pre, last) = e.split_at(self.n);
            match out.iter_mut().find(|(p, _)| p.as_slice() == pre) {
                Some(b) => b.1 = b.1.max(last[0]),
                None => out.push((pre.to_vec(), last[0])),
            }
        }
        out.sort();
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    U0,
    Sigma,
    Frak,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockInfo {
    pub kind: BlockKind,
    pub macro_level: u32,
    pub micro_level: u32,
    pub dim_x: usize,
    pub dim_y: usize,
    pub offset: usize,
}

impl BlockInfo {
    pub fn dim(&self) -> usize {
        self.dim_x * self.dim_y
    }
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.dim()
    }
}

/// Block layout of the discrete two-scale space with one micro scale.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoScaleSpace {
    pub level: u32,
    pub mode: Mode,
    pub blocks: Vec<BlockInfo>,
}

impl TwoScaleSpace {
    pub fn new(level: u32, mode: Mode) -> Self {
        let set = SparseIndexSet::new(1, level, mode);
        let macro_blocks = set.blocks();
        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut push = |kind, l, m, dx: usize, dy: usize, blocks: &mut Vec<BlockInfo>| {
            if dx * dy == 0 {
                return;
            }
            blocks.push(BlockInfo { kind, macro_level: l, micro_level: m, dim_x: dx, dim_y: dy, offset });
            offset += dx * dy;
        };
        push(BlockKind::U0, level, 0, factor_dim(FactorKind::EdgeD, level), 1, &mut blocks);
        for kind in [BlockKind::Sigma, BlockKind::Frak] {
            for (pre, m) in &macro_blocks {
                let l = pre[0];
                let dx = factor_dim(FactorKind::DetailNodalD, l);
                let dy = match kind {
                    BlockKind::Sigma => factor_dim(FactorKind::PconstZeroMeanPeriodic, *m),
                    _ => factor_dim(FactorKind::NodalPeriodic, *m),
                };
                push(kind, l, *m, dx, dy, &mut blocks);
            }
        }
        TwoScaleSpace { level, mode, blocks }
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.dim()).sum()
    }

    pub fn range_of(&self, kind: BlockKind) -> std::ops::Range<usize> {
        let mut it = self.blocks.iter().filter(|b| b.kind == kind);
        match it.next() {
            None => 0..0,
            Some(first) => {
                let end = self.blocks.iter().filter(|b| b.kind == kind).map(|b| b.offset + b.dim()).max().unwrap();
                first.offset..end
            }
        }
    }

    pub fn block_ids(&self, kind: BlockKind) -> Vec<usize> {
        (0..self.blocks.len()).filter(|&i| self.blocks[i].kind == kind).collect()
    }

    /// Degrees of freedom of each component: (u0, sigma, frak).
    pub fn component_dims(&self) -> (usize, usize, usize) {
        let c = |k| self.range_of(k).len();
        (c(BlockKind::U0), c(BlockKind::Sigma), c(BlockKind::Frak))
    }
}

/// Total number of unknowns of the space, without building anything.
pub fn dof_count(level: u32, mode: Mode) -> usize {
    TwoScaleSpace::new(level, mode).dim()
}

/// `scale * X (x) Y`.
#[derive(Clone, Debug)]
pub struct KronTerm {
    pub x: Arc<CsMat<f64>>,
    pub y: Arc<CsMat<f64>>,
    pub scale: f64,
}

impl KronTerm {
    pub fn new(x: CsMat<f64>, y: CsMat<f64>) -> Self {
        KronTerm { x: Arc::new(x), y: Arc::new(y), scale: 1.0 }
    }

    pub fn transposed(&self) -> Self {
        KronTerm {
            x: Arc::new(linalg::transpose(&self.x)),
            y: Arc::new(linalg::transpose(&self.y)),
            scale: self.scale,
        }
    }

    /// `out += scale * X V Y^T` with `V` row-major `cols(X) x cols(Y)`.
    pub fn apply_acc(&self, v: &[f64], out: &mut [f64]) {
        let (rx, cx) = self.x.shape();
        let (ry, cy) = self.y.shape();
        debug_assert_eq!(v.len(), cx * cy);
        debug_assert_eq!(out.len(), rx * ry);
        let cost_a = cx * self.y.nnz() + self.x.nnz() * ry;
        let cost_b = self.x.nnz() * cy + rx * self.y.nnz();
        let xi = self.x.indptr();
        let xi = xi.raw_storage();
        let xj = self.x.indices();
        let xv = self.x.data();
        if cost_a <= cost_b {
            // W = V Y^T, then out += X W
            let mut w = vec![0.0; cx * ry];
            for p in 0..cx {
                csr_matvec(&self.y, &v[p * cy..(p + 1) * cy], &mut w[p * ry..(p + 1) * ry], 1.0, 0.0);
            }
            for i in 0..rx {
                let o = &mut out[i * ry..(i + 1) * ry];
                for k in xi[i]..xi[i + 1] {
                    let s = self.scale * xv[k];
                    let wr = &w[xj[k] * ry..(xj[k] + 1) * ry];
                    for (a, b) in o.iter_mut().zip(wr) {
                        *a += s * b;
                    }
                }
            }
        } else {
            // Z = X V, then out += Z Y^T
            let mut z = vec![0.0; cy];
            let mut t = vec![0.0; ry];
            for i in 0..rx {
                z.iter_mut().for_each(|a| *a = 0.0);
                for k in xi[i]..xi[i + 1] {
                    let s = xv[k];
                    let vr = &v[xj[k] * cy..(xj[k] + 1) * cy];
                    for (a, b) in z.iter_mut().zip(vr) {
                        *a += s * b;
                    }
                }
                csr_matvec(&self.y, &z, &mut t, 1.0, 0.0);
                for (a, b) in out[i * ry..(i + 1) * ry].iter_mut().zip(&t) {
                    *a += self.scale * b;
                }
            }
        }
    }

    pub fn to_sparse(&self) -> CsMat<f64> {
        linalg::scaled(&linalg::kron(&self.x, &self.y), self.scale)
    }
}

/// Square operator on a block layout; `entries[r]` lists `(column block, term)`.
#[derive(Clone, Debug)]
pub struct BlockOperator {
    pub blocks: Vec<BlockInfo>,
    pub entries: Vec<Vec<(usize, KronTerm)>>,
}

impl BlockOperator {
    pub fn zero(blocks: Vec<BlockInfo>) -> Self {
        let n = blocks.len();
        BlockOperator { blocks, entries: vec![Vec::new(); n] }
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.dim()).sum()
    }

    pub fn push(&mut self, r: usize, c: usize, term: KronTerm) {
        debug_assert_eq!(term.x.rows(), self.blocks[r].dim_x);
        debug_assert_eq!(term.y.rows(), self.blocks[r].dim_y);
        debug_assert_eq!(term.x.cols(), self.blocks[c].dim_x);
        debug_assert_eq!(term.y.cols(), self.blocks[c].dim_y);
        self.entries[r].push((c, term));
    }

    /// Add `term` at (r, c) and its transpose at (c, r).
    pub fn push_symmetric(&mut self, r: usize, c: usize, term: KronTerm) {
        if r != c {
            let t = term.transposed();
            self.push(c, r, t);
        }
        self.push(r, c, term);
    }

    pub fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for (r, row) in self.entries.iter().enumerate() {
            let rr = self.blocks[r].range();
            for (c, term) in row {
                let cr = self.blocks[*c].range();
                term.apply_acc(&x[cr], &mut y[rr.clone()]);
            }
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim()];
        self.apply_into(x, &mut y);
        y
    }

    /// `sum_i s_i A_i` over operators sharing one layout.
    pub fn combine(parts: &[(f64, &BlockOperator)]) -> BlockOperator {
        let mut out = BlockOperator::zero(parts[0].1.blocks.clone());
        for &(s, op) in parts {
            assert_eq!(op.blocks, out.blocks, "block layouts differ");
            if s == 0.0 {
                continue;
            }
            for (r, row) in op.entries.iter().enumerate() {
                for (c, t) in row {
                    let mut t = t.clone();
                    t.scale *= s;
                    out.entries[r].push((*c, t));
                }
            }
        }
        out
    }

    /// Restriction to a subset of blocks, re-offset contiguously.
    pub fn restrict(&self, ids: &[usize]) -> BlockOperator {
        let mut blocks = Vec::with_capacity(ids.len());
        let mut off = 0;
        for &i in ids {
            let mut b = self.blocks[i];
            b.offset = off;
            off += b.dim();
            blocks.push(b);
        }
        let mut out = BlockOperator::zero(blocks);
        for (ri, &r) in ids.iter().enumerate() {
            for (c, t) in &self.entries[r] {
                if let Some(ci) = ids.iter().position(|x| x == c) {
                    out.entries[ri].push((ci, t.clone()));
                }
            }
        }
        out
    }

    pub fn block_to_sparse(&self, r: usize, c: usize) -> CsMat<f64> {
        let shape = (self.blocks[r].dim(), self.blocks[c].dim());
        let parts: Vec<CsMat<f64>> =
            self.entries[r].iter().filter(|(cc, _)| *cc == c).map(|(_, t)| t.to_sparse()).collect();
        if parts.is_empty() {
            return CsMat::zero(shape);
        }
        let refs: Vec<(f64, &CsMat<f64>)> = parts.iter().map(|p| (1.0, p)).collect();
        linalg::linear_combination(&refs)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for (r, row) in self.entries.iter().enumerate() {
            let ro = self.blocks[r].offset;
            for (c, t) in row {
                let co = self.blocks[*c].offset;
                for (v, (i, j)) in t.to_sparse().iter() {
                    m[(ro + i, co + j)] += *v;
                }
            }
        }
        m
    }
}

enum BlockSolver {
    Explicit(SpdSolver),
    Kron { x: SpdSolver, y: SpdSolver, scale: f64 },
}

/// Block-diagonal preconditioner with factor solves on the diagonal blocks.
///
/// A diagonal block that is a single Kronecker product is inverted through its
/// factors; blocks with several terms are assembled when small and otherwise
/// approximated by their first term.
pub struct BlockJacobi {
    blocks: Vec<BlockInfo>,
    solvers: Vec<BlockSolver>,
}

/// Largest Kronecker expansion assembled explicitly for a multi-term block.
const EXPLICIT_NNZ_LIMIT: usize = 400_000;

impl BlockJacobi {
    pub fn new(op: &BlockOperator) -> Result<Self, SolveError> {
        let mut solvers = Vec::with_capacity(op.blocks.len());
        for (r, b) in op.blocks.iter().enumerate() {
            let diag: Vec<&KronTerm> =
                op.entries[r].iter().filter(|(c, _)| *c == r).map(|(_, t)| t).collect();
            if diag.is_empty() {
                return Err(SolveError::Factorization(format!("block {r} has no diagonal term")));
            }
            let kron_nnz: usize = diag.iter().map(|t| t.x.nnz() * t.y.nnz()).sum();
            let s = if b.dim_x == 1 || b.dim_y == 1 || (diag.len() > 1 && kron_nnz <= EXPLICIT_NNZ_LIMIT) {
                BlockSolver::Explicit(SpdSolver::auto(&op.block_to_sparse(r, r))?)
            } else {
                let t = diag[0];
                BlockSolver::Kron {
                    x: SpdSolver::auto(&t.x)?,
                    y: SpdSolver::auto(&t.y)?,
                    scale: t.scale,
                }
            };
            solvers.push(s);
        }
        Ok(BlockJacobi { blocks: op.blocks.clone(), solvers })
    }

    pub fn apply_into(&self, r: &[f64], z: &mut [f64]) {
        z.copy_from_slice(r);
        for (b, s) in self.blocks.iter().zip(&self.solvers) {
            let zz = &mut z[b.range()];
            match s {
                BlockSolver::Explicit(f) => f.solve_in_place(zz),
                BlockSolver::Kron { x, y, scale } => {
                    let (dx, dy) = (b.dim_x, b.dim_y);
                    for p in 0..dx {
                        y.solve_in_place(&mut zz[p * dy..(p + 1) * dy]);
                    }
                    let mut col = vec![0.0; dx];
                    for q in 0..dy {
                        for p in 0..dx {
                            col[p] = zz[p * dy + q];
                        }
                        x.solve_in_place(&mut col);
                        for p in 0..dx {
                            zz[p * dy + q] = col[p] / scale;
                        }
                    }
                }
            }
        }
    }
}

/// Quadrature refinement options.
#[derive(Debug, Clone, Copy)]
pub struct AssemblyOptions {
    /// Quadrature on D is refined until this effective level is reached.
    pub x_quadrature_level: u32,
    /// Same for Y, where coefficients oscillate.
    pub y_quadrature_level: u32,
}

impl Default for AssemblyOptions {
    fn default() -> Self {
        AssemblyOptions { x_quadrature_level: 3, y_quadrature_level: 5 }
    }
}

fn rule_for(level: u32, target: u32) -> TriangleRule {
    TriangleRule::degree5().composite(target.saturating_sub(level))
}

fn separable_terms<'a>(c: &'a Coefficient, name: &'static str) -> Result<&'a SeparableField, TensorError> {
    let s = c.as_separable().ok_or(TensorError::NonSeparable(name))?;
    if s.is_empty() {
        return Err(TensorError::EmptyCoefficient(name));
    }
    Ok(s)
}

/// Q1 cell and local nodal values on the square grid at `mesh.level`.
struct Q1Cell {
    nodes: [usize; 4],
    i: i64,
    j: i64,
    n: i64,
}

impl Q1Cell {
    fn of_triangle(mesh: &MeshLevel, t: usize) -> Q1Cell {
        let c = &mesh.tri_coords[t];
        let i = c.iter().map(|p| p[0]).min().unwrap();
        let j = c.iter().map(|p| p[1]).min().unwrap();
        let n = 1i64 << mesh.level;
        let w = (n + 1) as usize;
        let (iu, ju) = (i as usize, j as usize);
        Q1Cell { nodes: [ju * w + iu, ju * w + iu + 1, (ju + 1) * w + iu, (ju + 1) * w + iu + 1], i, j, n }
    }

    fn values(&self, p: Point) -> [f64; 4] {
        let xi = p[0] * self.n as f64 - self.i as f64;
        let eta = p[1] * self.n as f64 - self.j as f64;
        [(1.0 - xi) * (1.0 - eta), xi * (1.0 - eta), (1.0 - xi) * eta, xi * eta]
    }
}

/// Matrices of the x-factor at the finest level, one set per coefficient term.
struct DFactors {
    edge_mass: Vec<CsMat<f64>>,
    edge_node: Vec<[CsMat<f64>; 2]>,
    node_mass_b: Vec<CsMat<f64>>,
    curl: Vec<CsMat<f64>>,
    curl_node: Vec<CsMat<f64>>,
    node_mass_a: Vec<CsMat<f64>>,
}

/// Matrices of the y-factor at the finest level, one set per coefficient term.
struct YFactors {
    b_int: Vec<f64>,
    grad_row: Vec<[Vec<f64>; 2]>,
    stiff: Vec<CsMat<f64>>,
    a_int: Vec<f64>,
    pconst: Vec<Vec<f64>>,
}

/// Assembled two-scale operators with everything needed for loads and norms.
pub struct TwoScaleOperators {
    pub space: TwoScaleSpace,
    /// Inertia form: `int int b (v0 + grad_y v) . (w0 + grad_y w)`.
    pub gram: BlockOperator,
    /// Stiffness form: `int int a (curl v0 + s) (curl w0 + t)`.
    pub stiff: BlockOperator,
    pub d_meshes: Arc<MeshHierarchy>,
    pub y_meshes: Arc<MeshHierarchy>,
    pub options: AssemblyOptions,
    /// Q1 synthesis of the x-detail bases, by macro level.
    pub x_synthesis: Vec<Arc<CsMat<f64>>>,
    /// Triangle-value synthesis of the Haar bases, by micro level.
    pub sigma_synthesis: Vec<Arc<CsMat<f64>>>,
    /// Vertex-value synthesis of the pinned P1 bases, by micro level.
    pub frak_synthesis: Vec<Arc<CsMat<f64>>>,
    /// Interior-edge index of every edge of the finest D mesh.
    pub interior: Vec<Option<usize>>,
}

impl TwoScaleOperators {
    pub fn level(&self) -> u32 {
        self.space.level
    }

    pub fn d_mesh(&self) -> &MeshLevel {
        &self.d_meshes.levels[self.space.level as usize]
    }

    pub fn y_mesh(&self) -> &MeshLevel {
        &self.y_meshes.levels[self.space.level as usize]
    }
}

/// Assemble the inertia and stiffness operators for coefficients `a` (stiffness)
/// and `b` (inertia) on the given space.
pub fn assemble_blocks(
    space: &TwoScaleSpace,
    a: &Coefficient,
    b: &Coefficient,
    options: AssemblyOptions,
) -> Result<TwoScaleOperators, TensorError> {
    let a = separable_terms(a, "a")?;
    let b = separable_terms(b, "b")?;
    let l = space.level;
    let d_meshes = Arc::new(MeshHierarchy::new(l, false)?);
    let y_meshes = Arc::new(MeshHierarchy::new(l, true)?);
    let dm = &d_meshes.levels[l as usize];
    let ym = &y_meshes.levels[l as usize];
    let interior = interior_index(dm);

    let df = assemble_d_factors(dm, &interior, a, b, rule_for(l, options.x_quadrature_level))?;
    let yf = assemble_y_factors(ym, a, b, rule_for(l, options.y_quadrature_level))?;

    let mut x_synthesis = Vec::new();
    let mut sigma_synthesis = Vec::new();
    let mut frak_synthesis = Vec::new();
    for k in 0..=l {
        x_synthesis.push(Arc::new(FactorBasis::new(FactorKind::DetailNodalD, k, l, &d_meshes)?.synthesis));
        sigma_synthesis
            .push(Arc::new(FactorBasis::new(FactorKind::PconstZeroMeanPeriodic, k, l, &y_meshes)?.synthesis));
        frak_synthesis.push(Arc::new(FactorBasis::new(FactorKind::NodalPeriodic, k, l, &y_meshes)?.synthesis));
    }

    let blocks = space.blocks.clone();
    let mut gram = BlockOperator::zero(blocks.clone());
    let mut stiff = BlockOperator::zero(blocks.clone());
    let row = |v: &[f64]| -> CsMat<f64> {
        let trip: Vec<_> = v.iter().enumerate().filter(|(_, x)| **x != 0.0).map(|(j, &x)| (0, j, x)).collect();
        csr_from_triplets(1, v.len(), &trip)
    };
    let scalar = |v: f64| csr_from_triplets(1, 1, &[(0, 0, v)]);
    // row vector r^T T as a 1 x dim matrix
    let row_times = |r: &[f64], t: &CsMat<f64>| -> CsMat<f64> {
        let mut out = vec![0.0; t.cols()];
        for (v, (i, j)) in t.iter() {
            out[j] += r[i] * v;
        }
        row(&out)
    };

    for (ri, rb) in blocks.iter().enumerate() {
        for (ci, cb) in blocks.iter().enumerate().skip(ri) {
            match (rb.kind, cb.kind) {
                (BlockKind::U0, BlockKind::U0) => {
                    let g: Vec<(f64, &CsMat<f64>)> = df.edge_mass.iter().zip(&yf.b_int).map(|(m, &s)| (s, m)).collect();
                    gram.push(ri, ci, KronTerm::new(linalg::linear_combination(&g), scalar(1.0)));
                    let k: Vec<(f64, &CsMat<f64>)> = df.curl.iter().zip(&yf.a_int).map(|(m, &s)| (s, m)).collect();
                    stiff.push(ri, ci, KronTerm::new(linalg::linear_combination(&k), scalar(1.0)));
                }
                (BlockKind::U0, BlockKind::Frak) => {
                    let tx = &x_synthesis[cb.macro_level as usize];
                    let ty = &frak_synthesis[cb.micro_level as usize];
                    for k in 0..b.len() {
                        for c in 0..2 {
                            let x = linalg::product(&df.edge_node[k][c], tx);
                            let y = row_times(&yf.grad_row[k][c], ty);
                            if y.nnz() > 0 && x.nnz() > 0 {
                                gram.push_symmetric(ri, ci, KronTerm::new(x, y));
                            }
                        }
                    }
                }
                (BlockKind::U0, BlockKind::Sigma) => {
                    let tx = &x_synthesis[cb.macro_level as usize];
                    let ty = &sigma_synthesis[cb.micro_level as usize];
                    for k in 0..a.len() {
                        let x = linalg::product(&df.curl_node[k], tx);
                        let y = row_times(&yf.pconst[k], ty);
                        if y.nnz() > 0 && x.nnz() > 0 {
                            stiff.push_symmetric(ri, ci, KronTerm::new(x, y));
                        }
                    }
                }
                (BlockKind::Frak, BlockKind::Frak) => {
                    let (tx1, tx2) = (&x_synthesis[rb.macro_level as usize], &x_synthesis[cb.macro_level as usize]);
                    let (ty1, ty2) = (&frak_synthesis[rb.micro_level as usize], &frak_synthesis[cb.micro_level as usize]);
                    for k in 0..b.len() {
                        let x = linalg::congruence(tx1, &df.node_mass_b[k], tx2);
                        let y = linalg::congruence(ty1, &yf.stiff[k], ty2);
                        gram.push_symmetric(ri, ci, KronTerm::new(x, y));
                    }
                }
                (BlockKind::Sigma, BlockKind::Sigma) => {
                    let (tx1, tx2) = (&x_synthesis[rb.macro_level as usize], &x_synthesis[cb.macro_level as usize]);
                    let (ty1, ty2) = (&sigma_synthesis[rb.micro_level as usize], &sigma_synthesis[cb.micro_level as usize]);
                    for k in 0..a.len() {
                        let x = linalg::congruence(tx1, &df.node_mass_a[k], tx2);
                        let diag = diag_matrix(&yf.pconst[k]);
                        let y = linalg::congruence(ty1, &diag, ty2);
                        stiff.push_symmetric(ri, ci, KronTerm::new(x, y));
                    }
                }
                _ => {}
            }
        }
    }

    Ok(TwoScaleOperators {
        space: space.clone(),
        gram,
        stiff,
        d_meshes,
        y_meshes,
        options,
        x_synthesis,
        sigma_synthesis,
        frak_synthesis,
        interior,
    })
}

fn diag_matrix(d: &[f64]) -> CsMat<f64> {
    let trip: Vec<_> = d.iter().enumerate().map(|(i, &v)| (i, i, v)).collect();
    csr_from_triplets(d.len(), d.len(), &trip)
}

fn assemble_d_factors(
    mesh: &MeshLevel,
    interior: &[Option<usize>],
    a: &SeparableField,
    b: &SeparableField,
    rule: TriangleRule,
) -> Result<DFactors, TensorError> {
    let ne = interior.iter().filter(|x| x.is_some()).count();
    let n = (1usize << mesh.level) + 1;
    let nn = n * n;
    let (ka, kb) = (a.len(), b.len());
    let mut em = vec![Vec::new(); kb];
    let mut en = vec![[Vec::new(), Vec::new()]; kb];
    let mut nb = vec![Vec::new(); kb];
    let mut cc = vec![Vec::new(); ka];
    let mut cn = vec![Vec::new(); ka];
    let mut na = vec![Vec::new(); ka];
    for t in 0..mesh.n_triangles() {
        let g = TriangleGeometry::new(mesh.triangle_points(t))?;
        let te = mesh.tri_edges[t];
        let signs = [te[0].1, te[1].1, te[2].1];
        let ids = [interior[te[0].0], interior[te[1].0], interior[te[2].0]];
        let cell = Q1Cell::of_triangle(mesh, t);
        let curl = g.whitney_curl(&signs);
        for (bq, &wq) in rule.points.iter().zip(&rule.weights) {
            let p = g.point(bq);
            let w = wq * g.area;
            let wh = g.whitney(bq, &signs);
            let q1 = cell.values(p);
            for k in 0..kb {
                let c = w * (b.terms[k].x)(p);
                for i in 0..3 {
                    let Some(ei) = ids[i] else { continue };
                    for j in 0..3 {
                        if let Some(ej) = ids[j] {
                            em[k].push((ei, ej, c * (wh[i][0] * wh[j][0] + wh[i][1] * wh[j][1])));
                        }
                    }
                    for (aa, &na_) in q1.iter().enumerate() {
                        en[k][0].push((ei, cell.nodes[aa], c * wh[i][0] * na_));
                        en[k][1].push((ei, cell.nodes[aa], c * wh[i][1] * na_));
                    }
                }
                for aa in 0..4 {
                    for bb in 0..4 {
                        nb[k].push((cell.nodes[aa], cell.nodes[bb], c * q1[aa] * q1[bb]));
                    }
                }
            }
            for k in 0..ka {
                let c = w * (a.terms[k].x)(p);
                for i in 0..3 {
                    let Some(ei) = ids[i] else { continue };
                    for j in 0..3 {
                        if let Some(ej) = ids[j] {
                            cc[k].push((ei, ej, c * curl[i] * curl[j]));
                        }
                    }
                    for (aa, &na_) in q1.iter().enumerate() {
                        cn[k].push((ei, cell.nodes[aa], c * curl[i] * na_));
                    }
                }
                for aa in 0..4 {
                    for bb in 0..4 {
                        na[k].push((cell.nodes[aa], cell.nodes[bb], c * q1[aa] * q1[bb]));
                    }
                }
            }
        }
    }
    let m = |tr: &[(usize, usize, f64)], r, c| csr_from_triplets(r, c, tr);
    Ok(DFactors {
        edge_mass: em.iter().map(|t| m(t, ne, ne)).collect(),
        edge_node: en.iter().map(|t| [m(&t[0], ne, nn), m(&t[1], ne, nn)]).collect(),
        node_mass_b: nb.iter().map(|t| m(t, nn, nn)).collect(),
        curl: cc.iter().map(|t| m(t, ne, ne)).collect(),
        curl_node: cn.iter().map(|t| m(t, ne, nn)).collect(),
        node_mass_a: na.iter().map(|t| m(t, nn, nn)).collect(),
    })
}

fn assemble_y_factors(
    mesh: &MeshLevel,
    a: &SeparableField,
    b: &SeparableField,
    rule: TriangleRule,
) -> Result<YFactors, TensorError> {
    let nv = mesh.n_vertices();
    let nt = mesh.n_triangles();
    let (ka, kb) = (a.len(), b.len());
    let mut b_int = vec![0.0; kb];
    let mut grad_row = vec![[vec![0.0; nv], vec![0.0; nv]]; kb];
    let mut st = vec![Vec::new(); kb];
    let mut a_int = vec![0.0; ka];
    let mut pconst = vec![vec![0.0; nt]; ka];
    for t in 0..nt {
        let g = TriangleGeometry::new(mesh.triangle_points(t))?;
        let vs = mesh.triangles[t];
        for k in 0..kb {
            let c: f64 = rule
                .points
                .iter()
                .zip(&rule.weights)
                .map(|(bq, &wq)| wq * (b.terms[k].y)(g.point(bq)))
                .sum::<f64>()
                * g.area;
            b_int[k] += c;
            for i in 0..3 {
                grad_row[k][0][vs[i]] += c * g.grad[i][0];
                grad_row[k][1][vs[i]] += c * g.grad[i][1];
                for j in 0..3 {
                    st[k].push((vs[i], vs[j], c * (g.grad[i][0] * g.grad[j][0] + g.grad[i][1] * g.grad[j][1])));
                }
            }
        }
        for k in 0..ka {
            let c: f64 = rule
                .points
                .iter()
                .zip(&rule.weights)
                .map(|(bq, &wq)| wq * (a.terms[k].y)(g.point(bq)))
                .sum::<f64>()
                * g.area;
            a_int[k] += c;
            pconst[k][t] += c;
        }
    }
    Ok(YFactors {
        b_int,
        grad_row,
        stiff: st.iter().map(|t| csr_from_triplets(nv, nv, t)).collect(),
        a_int,
        pconst,
    })
}

/// Loads and projections of (separable) fields onto the discrete space.
impl TwoScaleOperators {
    fn x_rule(&self) -> TriangleRule {
        rule_for(self.level(), self.options.x_quadrature_level)
    }

    fn y_rule(&self) -> TriangleRule {
        rule_for(self.level(), self.options.y_quadrature_level)
    }

    /// `int_D f . w_i` over interior edges.
    pub fn load_u0(&self, f: &dyn Fn(Point) -> Point) -> Vec<f64> {
        let mesh = self.d_mesh();
        let rule = self.x_rule();
        let mut out = vec![0.0; self.space.range_of(BlockKind::U0).len()];
        for t in 0..mesh.n_triangles() {
            let g = TriangleGeometry::new(mesh.triangle_points(t)).expect("regular mesh");
            let te = mesh.tri_edges[t];
            let signs = [te[0].1, te[1].1, te[2].1];
            for (bq, &wq) in rule.points.iter().zip(&rule.weights) {
                let p = g.point(bq);
                let fv = f(p);
                let wh = g.whitney(bq, &signs);
                for i in 0..3 {
                    if let Some(e) = self.interior[te[i].0] {
                        out[e] += wq * g.area * (fv[0] * wh[i][0] + fv[1] * wh[i][1]);
                    }
                }
            }
        }
        out
    }

    /// `int_D X(x) w_i^c dx` (component `c`) or `int_D X curl w_i` (`c = 2`).
    fn x_edge_load(&self, f: &ScalarFn, c: usize) -> Vec<f64> {
        let mesh = self.d_mesh();
        let rule = self.x_rule();
        let mut out = vec![0.0; self.space.range_of(BlockKind::U0).len()];
        for t in 0..mesh.n_triangles() {
            let g = TriangleGeometry::new(mesh.triangle_points(t)).expect("regular mesh");
            let te = mesh.tri_edges[t];
            let signs = [te[0].1, te[1].1, te[2].1];
            let curl = g.whitney_curl(&signs);
            for (bq, &wq) in rule.points.iter().zip(&rule.weights) {
                let p = g.point(bq);
                let fv = f(p) * wq * g.area;
                let wh = g.whitney(bq, &signs);
                for i in 0..3 {
                    if let Some(e) = self.interior[te[i].0] {
                        out[e] += fv * if c == 2 { curl[i] } else { wh[i][c] };
                    }
                }
            }
        }
        out
    }

    /// `int_D X(x) phi_p(x) dx` for the Q1 nodes of the finest level.
    fn x_node_load(&self, f: &ScalarFn) -> Vec<f64> {
        let mesh = self.d_mesh();
        let rule = self.x_rule();
        let n = (1usize << mesh.level) + 1;
        let mut out = vec![0.0; n * n];
        for t in 0..mesh.n_triangles() {
            let g = TriangleGeometry::new(mesh.triangle_points(t)).expect("regular mesh");
            let cell = Q1Cell::of_triangle(mesh, t);
            for (bq, &wq) in rule.points.iter().zip(&rule.weights) {
                let p = g.point(bq);
                let fv = f(p) * wq * g.area;
                let q = cell.values(p);
                for a in 0..4 {
                    out[cell.nodes[a]] += fv * q[a];
                }
            }
        }
        out
    }

    /// `int_Y Y(y) dy`, per-triangle integrals, and `int_Y Y d_c lambda_v` per vertex.
    fn y_loads(&self, f: &ScalarFn) -> (f64, Vec<f64>, [Vec<f64>; 2]) {
        let mesh = self.y_mesh();
        let rule = self.y_rule();
        let mut tri = vec![0.0; mesh.n_triangles()];
        let mut grad = [vec![0.0; mesh.n_vertices()], vec![0.0; mesh.n_vertices()]];
        for t in 0..mesh.n_triangles() {
            let g = TriangleGeometry::new(mesh.triangle_points(t)).expect("regular mesh");
            let c: f64 =
                rule.points.iter().zip(&rule.weights).map(|(bq, &wq)| wq * f(g.point(bq))).sum::<f64>() * g.area;
            tri[t] = c;
            for i in 0..3 {
                grad[0][mesh.triangles[t][i]] += c * g.grad[i][0];
                grad[1][mesh.triangles[t][i]] += c * g.grad[i][1];
            }
        }
        (tri.iter().sum(), tri, grad)
    }

    fn synth_t(t: &CsMat<f64>, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; t.cols()];
        for (x, (i, j)) in t.iter() {
            out[j] += x * v[i];
        }
        out
    }

    /// Load of a scalar field against `curl w_i (x) 1` and `phi (x) chi`:
    /// `int int F (curl v0 + s)` for all basis functions.
    pub fn load_curl_part(&self, field: &SeparableField) -> Vec<f64> {
        let mut out = vec![0.0; self.space.dim()];
        let u0r = self.space.range_of(BlockKind::U0);
        for term in &field.terms {
            let (yint, ytri, _) = self.y_loads(&term.y);
            let xe = self.x_edge_load(&term.x, 2);
            for (o, v) in out[u0r.clone()].iter_mut().zip(&xe) {
                *o += v * yint;
            }
            let xn = self.x_node_load(&term.x);
            for b in self.space.blocks.iter().filter(|b| b.kind == BlockKind::Sigma) {
                let xv = Self::synth_t(&self.x_synthesis[b.macro_level as usize], &xn);
                let yv = Self::synth_t(&self.sigma_synthesis[b.micro_level as usize], &ytri);
                let o = &mut out[b.range()];
                for p in 0..b.dim_x {
                    for q in 0..b.dim_y {
                        o[p * b.dim_y + q] += xv[p] * yv[q];
                    }
                }
            }
        }
        out
    }

    /// Load of a vector field against `w_i (x) 1` and `phi (x) grad_y psi`:
    /// `int int F . (v0 + grad_y v)` for all basis functions.
    pub fn load_field_part(&self, field: &SeparableVector) -> Vec<f64> {
        let mut out = vec![0.0; self.space.dim()];
        let u0r = self.space.range_of(BlockKind::U0);
        for c in 0..2 {
            for term in &field.0[c].terms {
                let (yint, _, ygrad) = self.y_loads(&term.y);
                let xe = self.x_edge_load(&term.x, c);
                for (o, v) in out[u0r.clone()].iter_mut().zip(&xe) {
                    *o += v * yint;
                }
                let xn = self.x_node_load(&term.x);
                for b in self.space.blocks.iter().filter(|b| b.kind == BlockKind::Frak) {
                    let xv = Self::synth_t(&self.x_synthesis[b.macro_level as usize], &xn);
                    let yv = Self::synth_t(&self.frak_synthesis[b.micro_level as usize], &ygrad[c]);
                    let o = &mut out[b.range()];
                    for p in 0..b.dim_x {
                        for q in 0..b.dim_y {
                            o[p * b.dim_y + q] += xv[p] * yv[q];
                        }
                    }
                }
            }
        }
        out
    }

    /// Interpolate a vector field on D into the Whitney space (edge circulations).
    pub fn interpolate_u0(&self, f: &dyn Fn(Point) -> Point) -> Vec<f64> {
        let mesh = self.d_mesh();
        let mut out = vec![0.0; self.space.range_of(BlockKind::U0).len()];
        for e in 0..mesh.n_edges() {
            if let Some(i) = self.interior[e] {
                let (s, d) = mesh.edge_geometry(e);
                out[i] = crate::elements::edge_circulation(f, s, d, 3);
            }
        }
        out
    }

    /// Coefficients of the x-detail blocks synthesized on the finest grid:
    /// returns a row-major `(Q1 nodes) x (reference y dofs)` array for `kind`.
    pub fn synthesize(&self, kind: BlockKind, x: &[f64]) -> Vec<f64> {
        let (ny, synth) = match kind {
            BlockKind::Sigma => (self.y_mesh().n_triangles(), &self.sigma_synthesis),
            BlockKind::Frak => (self.y_mesh().n_vertices(), &self.frak_synthesis),
            BlockKind::U0 => panic!("u0 has no y-factor to synthesize"),
        };
        let n = (1usize << self.level()) + 1;
        let nx = n * n;
        let mut out = vec![0.0; nx * ny];
        for b in self.space.blocks.iter().filter(|b| b.kind == kind) {
            let v = &x[b.range()];
            let ty = &synth[b.micro_level as usize];
            let tx = &self.x_synthesis[b.macro_level as usize];
            let term = KronTerm { x: tx.clone(), y: ty.clone(), scale: 1.0 };
            term.apply_acc(v, &mut out);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{constant_fn, scalar_fn, SeparableTerm};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit() -> Coefficient {
        Coefficient::Separable(SeparableField::constant(1.0))
    }

    fn oscillating() -> Coefficient {
        Coefficient::Separable(SeparableField {
            terms: vec![SeparableTerm {
                x: scalar_fn(|x| 1.0 + 0.5 * x[0]),
                y: scalar_fn(|y| 1.0 + (2.0 * std::f64::consts::PI * y[0]).cos().powi(2)),
            }],
        })
    }

    #[test]
    fn index_set_order() {
        let s = SparseIndexSet::new(1, 2, Mode::Sparse);
        let want: Vec<Vec<u32>> = vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![0, 2], vec![1, 1], vec![2, 0]];
        assert_eq!(s.entries, want);
        assert_eq!(s.blocks(), vec![(vec![0], 2), (vec![1], 1), (vec![2], 0)]);
        let f = SparseIndexSet::new(1, 2, Mode::Full);
        assert_eq!(f.entries.len(), 9);
        assert_eq!(f.blocks(), vec![(vec![0], 2), (vec![1], 2), (vec![2], 2)]);
    }

    #[test]
    fn dof_counts_grow_as_expected() {
        // full ~ 4^L * 4^L, sparse ~ L 4^L
        for l in 1..=5u32 {
            let (u, s, f) = TwoScaleSpace::new(l, Mode::Full).component_dims();
            let n = 1usize << l;
            assert_eq!(u, 3 * n * n - 2 * n);
            let nx = (n + 1) * (n + 1);
            assert_eq!(s, nx * (2 * n * n - 1));
            assert_eq!(f, nx * (n * n - 1));
        }
        let r4 = dof_count(4, Mode::Sparse) as f64;
        let r5 = dof_count(5, Mode::Sparse) as f64;
        assert!(r5 / r4 < 5.5, "sparse growth {}", r5 / r4);
        assert!(dof_count(5, Mode::Sparse) * 10 < dof_count(5, Mode::Full));
    }

    #[test]
    fn kron_apply_matches_explicit_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut rand_mat = |r: usize, c: usize| {
            let trip: Vec<_> = (0..r * c / 2)
                .map(|_| (rng.random_range(0..r), rng.random_range(0..c), rng.random_range(-1.0..1.0)))
                .collect();
            csr_from_triplets(r, c, &trip)
        };
        for &(rx, cx, ry, cy) in &[(3, 5, 4, 2), (7, 2, 1, 9), (6, 6, 6, 6)] {
            let t = KronTerm { x: Arc::new(rand_mat(rx, cx)), y: Arc::new(rand_mat(ry, cy)), scale: 1.7 };
            let v: Vec<f64> = (0..cx * cy).map(|i| (i as f64 * 0.37).sin()).collect();
            let mut out = vec![0.5; rx * ry];
            t.apply_acc(&v, &mut out);
            let mut want = vec![0.5; rx * ry];
            csr_matvec(&t.to_sparse(), &v, &mut want, 1.0, 1.0);
            for (a, b) in out.iter().zip(&want) {
                assert!((a - b).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn operators_are_symmetric_and_gram_is_positive_definite() {
        for mode in [Mode::Full, Mode::Sparse] {
            let space = TwoScaleSpace::new(2, mode);
            let ops = assemble_blocks(&space, &oscillating(), &oscillating(), AssemblyOptions::default()).unwrap();
            let g = ops.gram.to_dense();
            let k = ops.stiff.to_dense();
            assert!((&g - g.transpose()).abs().max() < 1e-13);
            assert!((&k - k.transpose()).abs().max() < 1e-13);
            // the gram form is singular on sigma; restricted to (u0, frak) it is SPD
            let mut ids = space.block_ids(BlockKind::U0);
            ids.extend(space.block_ids(BlockKind::Frak));
            let gr = ops.gram.restrict(&ids).to_dense();
            let ev = gr.symmetric_eigenvalues();
            assert!(ev.min() > 1e-10, "min eigenvalue {}", ev.min());
            // the full energy operator is SPD
            let s = BlockOperator::combine(&[(1.0, &ops.gram), (1.0, &ops.stiff)]).to_dense();
            assert!(s.symmetric_eigenvalues().min() > 1e-10);
        }
    }

    #[test]
    fn block_jacobi_is_exact_on_a_block_diagonal_operator() {
        let space = TwoScaleSpace::new(2, Mode::Sparse);
        let ops = assemble_blocks(&space, &unit(), &oscillating(), AssemblyOptions::default()).unwrap();
        let s = BlockOperator::combine(&[(16.0, &ops.gram), (0.25, &ops.stiff)]);
        let ids = space.block_ids(BlockKind::Frak);
        let frak = s.restrict(&ids[..1]);
        let pre = BlockJacobi::new(&frak).unwrap();
        let x: Vec<f64> = (0..frak.dim()).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let b = frak.apply(&x);
        let mut z = vec![0.0; b.len()];
        pre.apply_into(&b, &mut z);
        for (a, b) in z.iter().zip(&x) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn curl_load_separates_cell_mean_and_oscillation() {
        // zero-mean y-parts only reach sigma rows, constant ones only u0 rows
        let space = TwoScaleSpace::new(2, Mode::Sparse);
        let ops = assemble_blocks(&space, &unit(), &unit(), AssemblyOptions::default()).unwrap();
        let f = SeparableField {
            terms: vec![SeparableTerm {
                x: scalar_fn(|x| x[0] * (1.0 - x[1])),
                y: scalar_fn(|y| (2.0 * std::f64::consts::PI * y[0]).sin()),
            }],
        };
        let load = ops.load_curl_part(&f);
        // u0 rows see only the cell mean of f, which is zero
        let u0 = space.range_of(BlockKind::U0);
        assert!(load[u0].iter().all(|v| v.abs() < 1e-12));
        let g = SeparableField::product(constant_fn(2.0), constant_fn(1.0));
        let lg = ops.load_curl_part(&g);
        assert!(lg[space.range_of(BlockKind::Sigma)].iter().all(|v| v.abs() < 1e-12));
    }
}
