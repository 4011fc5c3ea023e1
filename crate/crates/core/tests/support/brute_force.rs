//! Dense inertia and stiffness matrices of the two-scale space by direct
//! quadrature over D x Y, from explicitly evaluated basis functions.

use mstmax_core::elements::{TriangleGeometry, TriangleRule};
use mstmax_core::fields::{constant_fn, scalar_fn, Coefficient, SeparableField, SeparableTerm};
use mstmax_core::mesh2d::Point;
use mstmax_core::tensor::{BlockKind, TwoScaleOperators};
use nalgebra::DMatrix;

pub fn coefficients() -> (Coefficient, Coefficient) {
    // polynomial factors so that degree-5 quadrature is exact on both sides
    let a = SeparableField {
        terms: vec![
            SeparableTerm { x: scalar_fn(|x| 1.0 + 0.5 * x[0]), y: scalar_fn(|y| 1.0 + y[0] * (1.0 - y[0])) },
            SeparableTerm { x: scalar_fn(|x| 0.25 + x[1]), y: scalar_fn(|y| y[1] * (1.0 - y[1])) },
        ],
    };
    let b = SeparableField {
        terms: vec![
            SeparableTerm { x: scalar_fn(|x| 2.0 + x[0] + 0.5 * x[1]), y: constant_fn(1.0) },
            SeparableTerm { x: constant_fn(0.5), y: scalar_fn(|y| y[0] * y[1] * (1.0 - y[0]) * (1.0 - y[1])) },
        ],
    };
    (Coefficient::Separable(a), Coefficient::Separable(b))
}

fn cross(a: Point, b: Point) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

fn close(a: Point, b: Point) -> bool {
    (a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12
}

/// Dense inertia and stiffness matrices by direct D x Y quadrature.
pub fn brute_force(ops: &TwoScaleOperators, a: &Coefficient, b: &Coefficient) -> (DMatrix<f64>, DMatrix<f64>) {
    let dm = ops.d_mesh();
    let ym = ops.y_mesh();
    let space = &ops.space;
    let n = space.dim();
    let nq = (1usize << dm.level) + 1;
    let rule = TriangleRule::degree5();

    // x-side samples: point, weight, Whitney values/curls (by global index), Q1 values by node
    struct XSample {
        p: Point,
        w: f64,
        whitney: Vec<(usize, Point, f64)>,
        q1: Vec<(usize, f64)>,
    }
    let mut xs = Vec::new();
    for t in 0..dm.n_triangles() {
        let pts = dm.triangle_points(t);
        let g = TriangleGeometry::new(pts).unwrap();
        let i0 = pts.iter().map(|p| (p[0] * (nq - 1) as f64).round() as usize).min().unwrap();
        let j0 = pts.iter().map(|p| (p[1] * (nq - 1) as f64).round() as usize).min().unwrap();
        let h = 1.0 / (nq - 1) as f64;
        for (bq, &wq) in rule.points.iter().zip(&rule.weights) {
            let p = g.point(bq);
            let mut whitney = Vec::new();
            for &(e, _) in &dm.tri_edges[t] {
                let Some(idx) = ops.interior[e] else { continue };
                let (s, d) = dm.edge_geometry(e);
                let end = [s[0] + d[0], s[1] + d[1]];
                let ia = (0..3).find(|&k| close(pts[k], s)).unwrap();
                let ib = (0..3).find(|&k| close(pts[k], end)).unwrap();
                let (ga, gb) = (g.grad[ia], g.grad[ib]);
                let w = [bq[ia] * gb[0] - bq[ib] * ga[0], bq[ia] * gb[1] - bq[ib] * ga[1]];
                whitney.push((idx, w, 2.0 * cross(ga, gb)));
            }
            let xi = (p[0] - i0 as f64 * h) / h;
            let eta = (p[1] - j0 as f64 * h) / h;
            let q1 = vec![
                (j0 * nq + i0, (1.0 - xi) * (1.0 - eta)),
                (j0 * nq + i0 + 1, xi * (1.0 - eta)),
                ((j0 + 1) * nq + i0, (1.0 - xi) * eta),
                ((j0 + 1) * nq + i0 + 1, xi * eta),
            ];
            xs.push(XSample { p, w: wq * g.area, whitney, q1 });
        }
    }

    struct YSample {
        p: Point,
        w: f64,
        tri: usize,
        grads: [(usize, Point); 3],
    }
    let mut ys = Vec::new();
    for t in 0..ym.n_triangles() {
        let g = TriangleGeometry::new(ym.triangle_points(t)).unwrap();
        let vs = ym.triangles[t];
        for (bq, &wq) in rule.points.iter().zip(&rule.weights) {
            ys.push(YSample {
                p: g.point(bq),
                w: wq * g.area,
                tri: t,
                grads: [(vs[0], g.grad[0]), (vs[1], g.grad[1]), (vs[2], g.grad[2])],
            });
        }
    }

    let xsyn: Vec<DMatrix<f64>> = ops.x_synthesis.iter().map(|m| mstmax_core::linalg::to_dense(m)).collect();
    let ssyn: Vec<DMatrix<f64>> = ops.sigma_synthesis.iter().map(|m| mstmax_core::linalg::to_dense(m)).collect();
    let fsyn: Vec<DMatrix<f64>> = ops.frak_synthesis.iter().map(|m| mstmax_core::linalg::to_dense(m)).collect();

    let mut gram = DMatrix::zeros(n, n);
    let mut stiff = DMatrix::zeros(n, n);
    let u0 = space.range_of(BlockKind::U0);
    for x in &xs {
        // x-factor values of every detail basis function, by macro level
        let xval: Vec<Vec<f64>> = xsyn
            .iter()
            .map(|s| (0..s.ncols()).map(|c| x.q1.iter().map(|&(node, v)| s[(node, c)] * v).sum()).collect())
            .collect();
        for y in &ys {
            let mut field = vec![[0.0; 2]; n];
            let mut curl = vec![0.0; n];
            for &(i, w, c) in &x.whitney {
                field[u0.start + i] = w;
                curl[u0.start + i] = c;
            }
            for blk in &space.blocks {
                let xv = &xval[blk.macro_level as usize];
                match blk.kind {
                    BlockKind::U0 => {}
                    BlockKind::Sigma => {
                        let s = &ssyn[blk.micro_level as usize];
                        for p in 0..blk.dim_x {
                            for q in 0..blk.dim_y {
                                curl[blk.offset + p * blk.dim_y + q] = xv[p] * s[(y.tri, q)];
                            }
                        }
                    }
                    BlockKind::Frak => {
                        let s = &fsyn[blk.micro_level as usize];
                        for q in 0..blk.dim_y {
                            let mut gy = [0.0; 2];
                            for &(v, gr) in &y.grads {
                                gy[0] += s[(v, q)] * gr[0];
                                gy[1] += s[(v, q)] * gr[1];
                            }
                            for p in 0..blk.dim_x {
                                field[blk.offset + p * blk.dim_y + q] = [xv[p] * gy[0], xv[p] * gy[1]];
                            }
                        }
                    }
                }
            }
            let w = x.w * y.w;
            let (av, bv) = (a.eval(x.p, y.p) * w, b.eval(x.p, y.p) * w);
            let nzf: Vec<usize> = (0..n).filter(|&i| field[i] != [0.0; 2]).collect();
            let nzc: Vec<usize> = (0..n).filter(|&i| curl[i] != 0.0).collect();
            for &i in &nzf {
                for &j in &nzf {
                    gram[(i, j)] += bv * (field[i][0] * field[j][0] + field[i][1] * field[j][1]);
                }
            }
            for &i in &nzc {
                for &j in &nzc {
                    stiff[(i, j)] += av * curl[i] * curl[j];
                }
            }
        }
    }
    (gram, stiff)
}
