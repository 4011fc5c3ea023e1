//! Unfolding, corrector reconstruction, error norms and CSV output.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::elements::{gauss_legendre, TriangleGeometry, TriangleRule};
use crate::fields::{SeparableField, SeparableVector};
use crate::linalg::{dot, pcg, SolveError};
use crate::mesh2d::{MeshLevel, Point};
use crate::reference::FineOperators;
use crate::tensor::{BlockJacobi, BlockKind, BlockOperator, TwoScaleOperators};

/// Tensor Gauss-Legendre rule on the unit square: `cells^2` sub-squares with
/// `n^2` points each.
#[derive(Debug, Clone)]
pub struct SquareRule {
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
}

impl SquareRule {
    pub fn new(cells: usize, n: usize) -> Self {
        let (x, w) = gauss_legendre(n);
        let h = 1.0 / cells as f64;
        let mut points = Vec::with_capacity(cells * cells * n * n);
        let mut weights = Vec::with_capacity(points.capacity());
        for cj in 0..cells {
            for ci in 0..cells {
                for (yj, wj) in x.iter().zip(&w) {
                    for (xi, wi) in x.iter().zip(&w) {
                        points.push([(ci as f64 + xi) * h, (cj as f64 + yj) * h]);
                        weights.push(wi * wj * h * h);
                    }
                }
            }
        }
        SquareRule { points, weights }
    }

    /// Rule used for exact-solution integrals.
    pub fn fine() -> Self {
        Self::new(32, 8)
    }

    pub fn integrate(&self, f: &(dyn Fn(Point) -> f64 + Sync)) -> f64 {
        self.points.par_iter().zip(&self.weights).map(|(p, w)| w * f(*p)).sum()
    }
}

/// `int_D int_Y f g` for separable fields.
pub fn separable_inner(f: &SeparableField, g: &SeparableField, rule: &SquareRule) -> f64 {
    let sample = |h: &crate::fields::ScalarFn| -> Vec<f64> { rule.points.par_iter().map(|p| h(*p)).collect() };
    let fx: Vec<Vec<f64>> = f.terms.iter().map(|t| sample(&t.x)).collect();
    let fy: Vec<Vec<f64>> = f.terms.iter().map(|t| sample(&t.y)).collect();
    let gx: Vec<Vec<f64>> = g.terms.iter().map(|t| sample(&t.x)).collect();
    let gy: Vec<Vec<f64>> = g.terms.iter().map(|t| sample(&t.y)).collect();
    let w = &rule.weights;
    let ip = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).zip(w).map(|((a, b), w)| a * b * w).sum() };
    let mut s = 0.0;
    for k in 0..f.len() {
        for l in 0..g.len() {
            s += ip(&fx[k], &gx[l]) * ip(&fy[k], &gy[l]);
        }
    }
    s
}

pub fn separable_vector_inner(f: &SeparableVector, g: &SeparableVector, rule: &SquareRule) -> f64 {
    separable_inner(&f.0[0], &g.0[0], rule) + separable_inner(&f.0[1], &g.0[1], rule)
}

fn fract(v: f64) -> f64 {
    v - v.floor()
}

/// The two-scale unfolding `U(phi)(x) = int_Y phi(eps [x/eps] + eps t, {x/eps}) dt`.
#[derive(Debug, Clone)]
pub struct Unfolding {
    pub eps: f64,
    /// Gauss points per direction for the cell average.
    pub n_gauss: usize,
}

impl Unfolding {
    pub fn new(eps: f64) -> Self {
        Unfolding { eps, n_gauss: 6 }
    }

    /// Lower-left corner `eps [x/eps]` of the cell containing x.
    pub fn cell_origin(&self, x: Point) -> Point {
        [self.eps * (x[0] / self.eps).floor(), self.eps * (x[1] / self.eps).floor()]
    }

    /// `{x/eps}`.
    pub fn micro(&self, x: Point) -> Point {
        [fract(x[0] / self.eps), fract(x[1] / self.eps)]
    }

    /// Average of `f` over the eps-cell with the given origin.
    pub fn cell_average(&self, origin: Point, f: &dyn Fn(Point) -> f64) -> f64 {
        let (t, w) = gauss_legendre(self.n_gauss);
        let mut s = 0.0;
        for (tj, wj) in t.iter().zip(&w) {
            for (ti, wi) in t.iter().zip(&w) {
                s += wi * wj * f([origin[0] + self.eps * ti, origin[1] + self.eps * tj]);
            }
        }
        s
    }

    pub fn apply(&self, phi: &dyn Fn(Point, Point) -> f64, x: Point) -> f64 {
        let y = self.micro(x);
        self.cell_average(self.cell_origin(x), &|z| phi(z, y))
    }

    /// Separable version with cell averages cached per term and cell.
    pub fn separable(&self, phi: &SeparableField) -> SeparableUnfolding<'_> {
        SeparableUnfolding { u: self, phi: phi.clone(), cache: std::sync::Mutex::new(HashMap::new()) }
    }
}

pub struct SeparableUnfolding<'a> {
    u: &'a Unfolding,
    phi: SeparableField,
    cache: std::sync::Mutex<HashMap<(i64, i64), Vec<f64>>>,
}

impl SeparableUnfolding<'_> {
    pub fn eval(&self, x: Point) -> f64 {
        let o = self.u.cell_origin(x);
        let key = ((o[0] / self.u.eps).round() as i64, (o[1] / self.u.eps).round() as i64);
        let avgs = {
            let mut c = self.cache.lock().unwrap();
            c.entry(key)
                .or_insert_with(|| self.phi.terms.iter().map(|t| self.u.cell_average(o, &*t.x)).collect())
                .clone()
        };
        let y = self.u.micro(x);
        self.phi.terms.iter().zip(&avgs).map(|(t, a)| a * (t.y)(y)).sum()
    }
}

/// Unfolding for `n` nested scales `eps[0] > eps[1] > ...` with integer ratios:
/// every argument except the last is averaged over its cell, the last one is
/// `{x / eps_n}`. `phi` takes `[x, y_1, ..., y_n]`.
pub fn unfold_n(phi: &dyn Fn(&[Point]) -> f64, eps: &[f64], x: Point, n_gauss: usize) -> f64 {
    let n = eps.len();
    let (t, w) = gauss_legendre(n_gauss);
    let pts: Vec<(Point, f64)> =
        t.iter().zip(&w).flat_map(|(tj, wj)| t.iter().zip(&w).map(move |(ti, wi)| ([*ti, *tj], wi * wj))).collect();
    // bases of the averaged arguments
    let mut base = Vec::with_capacity(n);
    base.push([eps[0] * (x[0] / eps[0]).floor(), eps[0] * (x[1] / eps[0]).floor()]);
    let mut scale = vec![eps[0]];
    for k in 1..n {
        let r = eps[k] / eps[k - 1];
        let fr = [fract(x[0] / eps[k - 1]), fract(x[1] / eps[k - 1])];
        base.push([r * (fr[0] / r).floor(), r * (fr[1] / r).floor()]);
        scale.push(r);
    }
    let last = [fract(x[0] / eps[n - 1]), fract(x[1] / eps[n - 1])];
    let mut args = vec![[0.0; 2]; n + 1];
    args[n] = last;
    fn rec(
        k: usize,
        args: &mut Vec<Point>,
        base: &[Point],
        scale: &[f64],
        pts: &[(Point, f64)],
        phi: &dyn Fn(&[Point]) -> f64,
    ) -> f64 {
        if k == base.len() {
            return phi(args);
        }
        let mut s = 0.0;
        for (t, w) in pts {
            args[k] = [base[k][0] + scale[k] * t[0], base[k][1] + scale[k] * t[1]];
            s += w * rec(k + 1, args, base, scale, pts, phi);
        }
        s
    }
    rec(0, &mut args, &base, &scale, &pts, phi)
}

/// Per-triangle curl of the u0 block on the finest D mesh.
pub fn u0_curls(ops: &TwoScaleOperators, c0: &[f64]) -> Vec<f64> {
    let mesh = ops.d_mesh();
    (0..mesh.n_triangles())
        .map(|t| {
            let g = TriangleGeometry::new(mesh.triangle_points(t)).expect("regular mesh");
            let te = mesh.tri_edges[t];
            let k = g.whitney_curl(&[te[0].1, te[1].1, te[2].1]);
            (0..3).map(|i| ops.interior[te[i].0].map_or(0.0, |e| k[i] * c0[e])).sum()
        })
        .collect()
}

/// u0 field on triangle `t` of the finest D mesh at barycentric point `b`.
pub fn u0_field(mesh: &MeshLevel, interior: &[Option<usize>], c0: &[f64], t: usize, b: &[f64; 3]) -> Point {
    let g = TriangleGeometry::new(mesh.triangle_points(t)).expect("regular mesh");
    let te = mesh.tri_edges[t];
    let w = g.whitney(b, &[te[0].1, te[1].1, te[2].1]);
    let mut v = [0.0; 2];
    for i in 0..3 {
        if let Some(e) = interior[te[i].0] {
            v[0] += c0[e] * w[i][0];
            v[1] += c0[e] * w[i][1];
        }
    }
    v
}

/// `(||u - u_h||_{L2}, ||curl u - curl u_h||_{L2})` on D by quadrature.
pub fn u0_errors(
    ops: &TwoScaleOperators,
    c0: &[f64],
    u: &(dyn Fn(Point) -> Point + Sync),
    curl: &(dyn Fn(Point) -> f64 + Sync),
) -> (f64, f64) {
    let mesh = ops.d_mesh();
    let rule = TriangleRule::degree5().composite(1);
    let curls = u0_curls(ops, c0);
    let (l2, c2) = (0..mesh.n_triangles())
        .into_par_iter()
        .map(|t| {
            let g = TriangleGeometry::new(mesh.triangle_points(t)).expect("regular mesh");
            let (mut a, mut b) = (0.0, 0.0);
            for (bq, &wq) in rule.points.iter().zip(&rule.weights) {
                let p = g.point(bq);
                let v = u0_field(mesh, &ops.interior, c0, t, bq);
                let e = u(p);
                let w = wq * g.area;
                a += w * ((e[0] - v[0]).powi(2) + (e[1] - v[1]).powi(2));
                b += w * (curl(p) - curls[t]).powi(2);
            }
            (a, b)
        })
        .reduce(|| (0.0, 0.0), |x, y| (x.0 + y.0, x.1 + y.1));
    (l2.max(0.0).sqrt(), c2.max(0.0).sqrt())
}

/// Squared-norm machinery for the micro components, from unit-coefficient operators.
pub struct MicroNorms<'a> {
    /// Operators with `a = b = 1` on the same space.
    pub unit: &'a TwoScaleOperators,
    pub rule: SquareRule,
}

impl<'a> MicroNorms<'a> {
    pub fn new(unit: &'a TwoScaleOperators) -> Self {
        MicroNorms { unit, rule: SquareRule::fine() }
    }

    /// `||sigma_h - sigma||_{L2(D x Y)}` for the sigma blocks of `x`.
    pub fn sigma_error(&self, x: &[f64], exact: &SeparableField) -> f64 {
        let sp = &self.unit.space;
        let mut s = vec![0.0; x.len()];
        let r = sp.range_of(BlockKind::Sigma);
        s[r.clone()].copy_from_slice(&x[r.clone()]);
        let ms = self.unit.stiff.apply(&s);
        let ell = self.unit.load_curl_part(exact);
        let hh = dot(&ms[r.clone()], &s[r.clone()]);
        let he = dot(&ell[r.clone()], &s[r]);
        let ee = separable_inner(exact, exact, &self.rule);
        (hh - 2.0 * he + ee).max(0.0).sqrt()
    }

    /// `||grad_y frak_h - grad_y frak||_{L2(D x Y)}` for the frak blocks of `x`.
    pub fn frak_error(&self, x: &[f64], exact: &SeparableVector) -> f64 {
        let sp = &self.unit.space;
        let mut s = vec![0.0; x.len()];
        let r = sp.range_of(BlockKind::Frak);
        s[r.clone()].copy_from_slice(&x[r.clone()]);
        let ms = self.unit.gram.apply(&s);
        let ell = self.unit.load_field_part(exact);
        let hh = dot(&ms[r.clone()], &s[r.clone()]);
        let he = dot(&ell[r.clone()], &s[r]);
        let ee = separable_vector_inner(exact, exact, &self.rule);
        (hh - 2.0 * he + ee).max(0.0).sqrt()
    }
}

/// Energy projection of a two-scale field onto the discrete space.
///
/// Minimizes `int int a |curl_total - (curl v0 + s)|^2 + b |field_total - (v0 + grad_y v)|^2`
/// and returns the attained error in that energy norm.
pub fn energy_projection_error(
    ops: &TwoScaleOperators,
    a: &SeparableField,
    b: &SeparableField,
    curl_total: &SeparableField,
    field_total: &SeparableVector,
    tol: f64,
) -> Result<(f64, Vec<f64>), SolveError> {
    let op = BlockOperator::combine(&[(1.0, &ops.stiff), (1.0, &ops.gram)]);
    let ac = a.times(curl_total);
    let bf = SeparableVector([b.times(&field_total.0[0]), b.times(&field_total.0[1])]);
    let l1 = ops.load_curl_part(&ac);
    let l2 = ops.load_field_part(&bf);
    let rhs: Vec<f64> = l1.iter().zip(&l2).map(|(x, y)| x + y).collect();
    let pre = BlockJacobi::new(&op)?;
    let mut c = vec![0.0; rhs.len()];
    pcg(&|v, o| op.apply_into(v, o), &|r, z| pre.apply_into(r, z), &rhs, &mut c, tol, 20_000)?;
    let rule = SquareRule::fine();
    let norm2 = separable_inner(&ac, curl_total, &rule) + separable_vector_inner(&bf, field_total, &rule);
    Ok(((norm2 - dot(&c, &rhs)).max(0.0).sqrt(), c))
}

/// Everything needed to evaluate `curl u0_h + U(curl_y u1_h)` and
/// `u0_h + U(grad_y frak_h)` on a fine mesh.
pub struct CorrectorField<'a> {
    pub ops: &'a TwoScaleOperators,
    pub eps: f64,
    /// Q1-node weights of the average over each eps-cell, keyed by cell index.
    cell_weights: Vec<Vec<(usize, f64)>>,
    cells: usize,
}

impl<'a> CorrectorField<'a> {
    pub fn new(ops: &'a TwoScaleOperators, eps: f64) -> Self {
        let cells = (1.0 / eps).round() as usize;
        let nl = 1usize << ops.level();
        let n1 = nl + 1;
        // average of a Q1 function over a box aligned with its grid = mean of its
        // values at the centres of the sub-boxes of size min(eps, h)
        let sub = (nl / cells).max(1);
        let hs = eps / sub as f64;
        let mut cell_weights = Vec::with_capacity(cells * cells);
        for cj in 0..cells {
            for ci in 0..cells {
                let mut wts: HashMap<usize, f64> = HashMap::new();
                for sj in 0..sub {
                    for si in 0..sub {
                        let p = [ci as f64 * eps + (si as f64 + 0.5) * hs, cj as f64 * eps + (sj as f64 + 0.5) * hs];
                        for (node, v) in q1_weights(p, nl) {
                            *wts.entry(node).or_default() += v / (sub * sub) as f64;
                        }
                    }
                }
                let mut w: Vec<(usize, f64)> = wts.into_iter().collect();
                w.sort_by_key(|e| e.0);
                cell_weights.push(w);
            }
        }
        debug_assert!(cell_weights.iter().all(|w| w.iter().all(|(n, _)| *n < n1 * n1)));
        CorrectorField { ops, eps, cell_weights, cells }
    }

    fn cell(&self, x: Point) -> usize {
        let c = self.cells;
        let i = ((x[0] / self.eps).floor() as usize).min(c - 1);
        let j = ((x[1] / self.eps).floor() as usize).min(c - 1);
        j * c + i
    }

    /// Unfolded sigma values: one vector over Y triangles (finest level) per eps-cell.
    pub fn unfolded_sigma(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let ny = self.ops.y_mesh().n_triangles();
        let s = self.ops.synthesize(BlockKind::Sigma, x);
        self.cell_weights
            .par_iter()
            .map(|w| {
                let mut v = vec![0.0; ny];
                for &(node, c) in w {
                    for (a, b) in v.iter_mut().zip(&s[node * ny..(node + 1) * ny]) {
                        *a += c * b;
                    }
                }
                v
            })
            .collect()
    }

    /// Unfolded frak vertex values, one vector over Y vertices per eps-cell.
    pub fn unfolded_frak(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let ny = self.ops.y_mesh().n_vertices();
        let s = self.ops.synthesize(BlockKind::Frak, x);
        self.cell_weights
            .par_iter()
            .map(|w| {
                let mut v = vec![0.0; ny];
                for &(node, c) in w {
                    for (a, b) in v.iter_mut().zip(&s[node * ny..(node + 1) * ny]) {
                        *a += c * b;
                    }
                }
                v
            })
            .collect()
    }

    /// `U(curl_y u1_h)(x)` from precomputed unfolded values.
    pub fn sigma_at(&self, unfolded: &[Vec<f64>], x: Point) -> f64 {
        let y = [fract(x[0] / self.eps), fract(x[1] / self.eps)];
        unfolded[self.cell(x)][self.ops.y_mesh().locate(y)]
    }

    /// `U(grad_y frak_h)(x)` from precomputed unfolded vertex values.
    pub fn grad_frak_at(&self, unfolded: &[Vec<f64>], x: Point) -> Point {
        let ym = self.ops.y_mesh();
        let y = [fract(x[0] / self.eps), fract(x[1] / self.eps)];
        let t = ym.locate(y);
        let g = TriangleGeometry::new(ym.triangle_points(t)).expect("regular mesh");
        let vals = &unfolded[self.cell(x)];
        let mut d = [0.0; 2];
        for i in 0..3 {
            let v = vals[ym.triangles[t][i]];
            d[0] += v * g.grad[i][0];
            d[1] += v * g.grad[i][1];
        }
        d
    }
}

fn q1_weights(p: Point, n: usize) -> [(usize, f64); 4] {
    let nf = n as f64;
    let i = ((p[0] * nf).floor() as usize).min(n - 1);
    let j = ((p[1] * nf).floor() as usize).min(n - 1);
    let xi = p[0] * nf - i as f64;
    let eta = p[1] * nf - j as f64;
    let w = n + 1;
    [
        (j * w + i, (1.0 - xi) * (1.0 - eta)),
        (j * w + i + 1, xi * (1.0 - eta)),
        ((j + 1) * w + i, (1.0 - xi) * eta),
        ((j + 1) * w + i + 1, xi * eta),
    ]
}

/// `||curl u_fine - (macro + micro)||_{L2(D)}` over the fine mesh, where `macro_curl`
/// and `micro` are evaluated at degree-5 points of every fine triangle.
pub fn fine_curl_distance(
    fine: &FineOperators,
    fine_curls: &[f64],
    approx: &(dyn Fn(Point) -> f64 + Sync),
) -> f64 {
    let rule = TriangleRule::degree5();
    fine.geometry
        .par_iter()
        .enumerate()
        .map(|(t, g)| {
            rule.points
                .iter()
                .zip(&rule.weights)
                .map(|(b, w)| w * g.area * (fine_curls[t] - approx(g.point(b))).powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        .sqrt()
}

/// `||v_fine - approx||_{L2(D)}` for vector fields on the fine mesh.
pub fn fine_field_distance(fine: &FineOperators, xf: &[f64], approx: &(dyn Fn(Point) -> Point + Sync)) -> f64 {
    let rule = TriangleRule::degree5();
    fine.geometry
        .par_iter()
        .enumerate()
        .map(|(t, g)| {
            rule.points
                .iter()
                .zip(&rule.weights)
                .map(|(b, w)| {
                    let v = fine.field(xf, t, b);
                    let a = approx(g.point(b));
                    w * g.area * ((v[0] - a[0]).powi(2) + (v[1] - a[1]).powi(2))
                })
                .sum::<f64>()
        })
        .sum::<f64>()
        .sqrt()
}

/// Half-step average `(x_{m+1} + x_m) / 2`.
pub fn half_step(xm: &[f64], xp: &[f64]) -> Vec<f64> {
    xm.iter().zip(xp).map(|(a, b)| 0.5 * (a + b)).collect()
}

/// Difference quotient `(x_{m+1} - x_m) / dt`.
pub fn half_step_rate(xm: &[f64], xp: &[f64], dt: f64) -> Vec<f64> {
    xm.iter().zip(xp).map(|(a, b)| (b - a) / dt).collect()
}

pub const CSV_HEADER: &str =
    "example,mode,L,h,dt,dofs,err_u0_hcurl,err_curlu1_l2,err_dt_u0,energy_drift,corrector_err,wall_time_s";

/// One CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub example: String,
    pub mode: String,
    pub level: u32,
    pub h: f64,
    pub dt: f64,
    pub dofs: usize,
    pub err_u0_hcurl: f64,
    pub err_curlu1_l2: f64,
    pub err_dt_u0: f64,
    pub energy_drift: f64,
    pub corrector_err: Option<f64>,
    pub wall_time_s: Option<f64>,
}

fn num(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:.16e}"),
        _ => "nan".to_string(),
    }
}

impl ErrorReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.example,
            self.mode,
            self.level,
            num(Some(self.h)),
            num(Some(self.dt)),
            self.dofs,
            num(Some(self.err_u0_hcurl)),
            num(Some(self.err_curlu1_l2)),
            num(Some(self.err_dt_u0)),
            num(Some(self.energy_drift)),
            num(self.corrector_err),
            num(self.wall_time_s),
        )
    }
}

/// CSV text: `# key = value` comment lines, the header, then the rows.
pub fn csv_text(comments: &[(String, String)], rows: &[ErrorReport]) -> String {
    let mut s = String::new();
    for (k, v) in comments {
        let _ = writeln!(s, "# {k} = {v}");
    }
    let _ = writeln!(s, "{CSV_HEADER}");
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

pub fn write_csv(path: &Path, comments: &[(String, String)], rows: &[ErrorReport]) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(csv_text(comments, rows).as_bytes())
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{constant_fn, scalar_fn, SeparableTerm};
    use crate::problems::{example, unit_coefficient};
    use crate::tensor::{assemble_blocks, AssemblyOptions, Mode, TwoScaleSpace};

    fn poly(x: Point, y: Point) -> f64 {
        1.0 + x[0] * x[0] * x[1] - 2.0 * x[1].powi(3) * y[0] + y[0] * y[1] * y[1] + x[0] * y[1].powi(4)
    }

    /// `int_D U(phi)` with Gauss points inside every eps-cell.
    fn integrate_unfolded(eps: f64, f: &dyn Fn(Point) -> f64) -> f64 {
        let u = Unfolding::new(eps);
        let n = (1.0 / eps).round() as usize;
        let mut s = 0.0;
        for j in 0..n {
            for i in 0..n {
                s += eps * eps * u.cell_average([i as f64 * eps, j as f64 * eps], f);
            }
        }
        s
    }

    #[test]
    fn unfolding_of_simple_functions() {
        let u = Unfolding::new(0.25);
        assert!((u.apply(&|_, _| 3.5, [0.3, 0.9]) - 3.5).abs() < 1e-14);
        // x-only: average over the cell [0.25, 0.5] x [0.75, 1]
        let v = u.apply(&|x, _| x[0] * x[1], [0.3, 0.9]);
        assert!((v - 0.375 * 0.875).abs() < 1e-14);
        // y-only: sampled at {x/eps}
        let w = u.apply(&|_, y| y[0] + 10.0 * y[1], [0.3, 0.9]);
        assert!((w - (0.2 + 6.0)).abs() < 1e-12);
    }

    #[test]
    fn unfolding_integral_identity() {
        let rhs = SquareRule::new(4, 6);
        let exact = rhs.integrate(&|x| rhs.points.iter().zip(&rhs.weights).map(|(y, w)| w * poly(x, *y)).sum());
        for eps in [0.5, 0.25, 0.125] {
            let u = Unfolding::new(eps);
            let lhs = integrate_unfolded(eps, &|x| u.apply(&poly, x));
            assert!((lhs - exact).abs() < 1e-10, "eps {eps}: {lhs} vs {exact}");
        }
    }

    #[test]
    fn separable_unfolding_matches_direct() {
        let f = SeparableField {
            terms: vec![
                SeparableTerm { x: scalar_fn(|x| x[0] * x[1]), y: scalar_fn(|y| (6.0 * y[0]).sin()) },
                SeparableTerm { x: constant_fn(2.0), y: scalar_fn(|y| y[1]) },
            ],
        };
        let u = Unfolding::new(0.125);
        let s = u.separable(&f);
        for x in [[0.01, 0.99], [0.5, 0.5], [0.7, 0.2]] {
            assert!((s.eval(x) - u.apply(&|a, b| f.eval(a, b), x)).abs() < 1e-14);
        }
    }

    #[test]
    fn multiscale_unfolding_integral_identity() {
        let phi = |a: &[Point]| 1.0 + a[0][0] * a[1][1] + a[1][0] * a[1][0] * a[2][1] + a[2][0] * a[0][1];
        let rule = SquareRule::new(2, 4);
        let mut exact = 0.0;
        for (x, wx) in rule.points.iter().zip(&rule.weights) {
            for (y1, w1) in rule.points.iter().zip(&rule.weights) {
                for (y2, w2) in rule.points.iter().zip(&rule.weights) {
                    exact += wx * w1 * w2 * phi(&[*x, *y1, *y2]);
                }
            }
        }
        let eps = [0.25, 0.0625];
        // U_n is piecewise polynomial on cells of size eps_2
        let n = 16;
        let (t, w) = gauss_legendre(3);
        let mut lhs = 0.0;
        for j in 0..n {
            for i in 0..n {
                for (tj, wj) in t.iter().zip(&w) {
                    for (ti, wi) in t.iter().zip(&w) {
                        let x = [(i as f64 + ti) / n as f64, (j as f64 + tj) / n as f64];
                        lhs += wi * wj * unfold_n(&phi, &eps, x, 3) / (n * n) as f64;
                    }
                }
            }
        }
        assert!((lhs - exact).abs() < 1e-10, "{lhs} vs {exact}");
    }

    #[test]
    fn separable_inner_products() {
        let rule = SquareRule::new(4, 6);
        let f = SeparableField::product(scalar_fn(|x| x[0]), scalar_fn(|y| y[1] * y[1]));
        // int x1^2 * int y2^4 = 1/3 * 1/5
        assert!((separable_inner(&f, &f, &rule) - 1.0 / 15.0).abs() < 1e-14);
    }

    #[test]
    fn u0_error_is_homogeneous_and_decreasing() {
        let (_, ex) = example(1).unwrap();
        let u = |x: Point| (ex.u0)(1.0, x);
        let c = |x: Point| (ex.curl_u0)(1.0, x);
        let mut prev = f64::INFINITY;
        for level in 1..=4 {
            let space = TwoScaleSpace::new(level, Mode::Sparse);
            let ops = assemble_blocks(&space, &unit_coefficient(), &unit_coefficient(), AssemblyOptions::default())
                .unwrap();
            let c0 = ops.interpolate_u0(&u);
            let (l2, cu) = u0_errors(&ops, &c0, &u, &c);
            let e = (l2 * l2 + cu * cu).sqrt();
            assert!(e < prev);
            prev = e;
            // distance to zero is the norm, and it scales linearly
            let z = vec![0.0; c0.len()];
            let c2: Vec<f64> = c0.iter().map(|v| 2.0 * v).collect();
            let zero = |_: Point| [0.0, 0.0];
            let (a1, b1) = u0_errors(&ops, &c0, &zero, &|_| 0.0);
            let (a2, b2) = u0_errors(&ops, &c2, &zero, &|_| 0.0);
            assert!((a2 - 2.0 * a1).abs() < 1e-12 && (b2 - 2.0 * b1).abs() < 1e-12);
            let (n1, n2) = u0_errors(&ops, &z, &u, &c);
            assert!(n1 > l2 && n2 > cu);
        }
        assert!(prev < 0.05);
    }

    #[test]
    fn sigma_error_of_projection_shrinks() {
        let (_, ex) = example(1).unwrap();
        let sigma = (ex.sigma)(1.0);
        let mut prev = f64::INFINITY;
        let mut full = 0.0;
        // g has period 1/2, so cell levels below 2 see only its mean
        for level in 1..=4 {
            let space = TwoScaleSpace::new(level, Mode::Sparse);
            let unit = assemble_blocks(&space, &unit_coefficient(), &unit_coefficient(), AssemblyOptions::default())
                .unwrap();
            let norms = MicroNorms::new(&unit);
            let zero = vec![0.0; space.dim()];
            full = separable_inner(&sigma, &sigma, &norms.rule).sqrt();
            assert!((norms.sigma_error(&zero, &sigma) - full).abs() < 1e-12 * full.max(1.0));
            // L2 projection onto the sigma blocks
            let ids = space.block_ids(BlockKind::Sigma);
            let m = unit.stiff.restrict(&ids);
            let ell = unit.load_curl_part(&sigma);
            let r = space.range_of(BlockKind::Sigma);
            let pre = BlockJacobi::new(&m).unwrap();
            let mut c = vec![0.0; r.len()];
            pcg(&|v, o| m.apply_into(v, o), &|a, z| pre.apply_into(a, z), &ell[r.clone()], &mut c, 1e-13, 1000).unwrap();
            let mut x = vec![0.0; space.dim()];
            x[r].copy_from_slice(&c);
            let e = norms.sigma_error(&x, &sigma);
            assert!(e <= prev * (1.0 + 1e-12), "level {level}: {e} after {prev}");
            prev = e;
        }
        assert!(prev < 0.5 * full, "{prev} vs {full}");
    }

    #[test]
    fn unfolded_discrete_corrector_has_zero_mean() {
        let space = TwoScaleSpace::new(3, Mode::Sparse);
        let ops = assemble_blocks(&space, &unit_coefficient(), &unit_coefficient(), AssemblyOptions::default()).unwrap();
        let x: Vec<f64> = (0..space.dim()).map(|i| ((i * 37) % 17) as f64 / 17.0 - 0.5).collect();
        for eps in [0.25, 0.125] {
            let cf = CorrectorField::new(&ops, eps);
            let un = cf.unfolded_sigma(&x);
            // piecewise constant on the level-6 mesh, so centroids are exact
            let fine = crate::mesh2d::MeshHierarchy::new(6, false).unwrap();
            let fm = fine.level(6).unwrap();
            let mean: f64 = (0..fm.n_triangles())
                .map(|t| {
                    let p = fm.triangle_points(t);
                    let c = [(p[0][0] + p[1][0] + p[2][0]) / 3.0, (p[0][1] + p[1][1] + p[2][1]) / 3.0];
                    fm.triangle_area() * cf.sigma_at(&un, c)
                })
                .sum();
            assert!(mean.abs() < 1e-12, "mean {mean:e}");
            let zero = cf.unfolded_sigma(&vec![0.0; space.dim()]);
            assert!(zero.iter().flatten().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn csv_rows_and_slopes() {
        let r = ErrorReport {
            example: "example1".into(),
            mode: "sparse".into(),
            level: 2,
            h: 0.25,
            dt: 0.25,
            dofs: 10,
            err_u0_hcurl: 0.1,
            err_curlu1_l2: 0.2,
            err_dt_u0: 0.3,
            energy_drift: 0.0,
            corrector_err: None,
            wall_time_s: None,
        };
        let row = r.csv_row();
        assert_eq!(row.split(',').count(), CSV_HEADER.split(',').count());
        assert!(row.starts_with("example1,sparse,2,2.5000000000000000e-1,"));
        assert!(row.ends_with(",nan,nan"));
        let text = csv_text(&[("T".into(), "1".into())], &[r]);
        assert!(text.starts_with("# T = 1\n"));
        let h = [0.5, 0.25, 0.125];
        let e: Vec<f64> = h.iter().map(|v| 3.0 * v * v).collect();
        assert!((loglog_slope(&h, &e) - 2.0).abs() < 1e-12);
    }
}
