//! Quadrature rules and lowest-order shape functions on triangles: P1 hats,
//! piecewise constants and Whitney edge functions `w_ij = l_i grad l_j - l_j grad l_i`.

use thiserror::Error;

use crate::mesh2d::{Point, LOCAL_EDGES};

#[derive(Debug, Error)]
pub enum ElementError {
    #[error("degenerate triangle (area {0:e})")]
    Degenerate(f64),
    #[error("coefficient sample {value} at ({x}, {y}) is not positive")]
    NonPositiveCoefficient { value: f64, x: f64, y: f64 },
}

/// Quadrature on the reference triangle in barycentric coordinates; weights sum to one.
#[derive(Debug, Clone)]
pub struct TriangleRule {
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

impl TriangleRule {
    pub fn centroid() -> Self {
        TriangleRule { points: vec![[1.0 / 3.0; 3]], weights: vec![1.0] }
    }

    /// Edge-midpoint rule, exact for quadratics.
    pub fn degree2() -> Self {
        TriangleRule {
            points: vec![[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]],
            weights: vec![1.0 / 3.0; 3],
        }
    }

    /// Seven-point rule exact for polynomials of degree five.
    pub fn degree5() -> Self {
        let s15 = 15f64.sqrt();
        let a1 = (6.0 - s15) / 21.0;
        let b1 = (9.0 + 2.0 * s15) / 21.0;
        let a2 = (6.0 + s15) / 21.0;
        let b2 = (9.0 - 2.0 * s15) / 21.0;
        let w1 = (155.0 - s15) / 1200.0;
        let w2 = (155.0 + s15) / 1200.0;
        let mut points = vec![[1.0 / 3.0; 3]];
        let mut weights = vec![9.0 / 40.0];
        for (a, b, w) in [(a1, b1, w1), (a2, b2, w2)] {
            points.push([b, a, a]);
            points.push([a, b, a]);
            points.push([a, a, b]);
            weights.extend([w; 3]);
        }
        TriangleRule { points, weights }
    }

    /// Apply `self` on each of the `4^r` congruent subtriangles.
    pub fn composite(&self, r: u32) -> Self {
        if r == 0 {
            return self.clone();
        }
        let sub = self.composite(r - 1);
        let v: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let mid = |i: usize, j: usize| -> [f64; 3] {
            let mut m = [0.0; 3];
            for k in 0..3 {
                m[k] = 0.5 * (v[i][k] + v[j][k]);
            }
            m
        };
        let (m01, m12, m02) = (mid(0, 1), mid(1, 2), mid(0, 2));
        let children = [[v[0], m01, m02], [m01, v[1], m12], [m02, m12, v[2]], [m01, m12, m02]];
        let mut points = Vec::with_capacity(4 * sub.points.len());
        let mut weights = Vec::with_capacity(4 * sub.points.len());
        for c in &children {
            for (p, &w) in sub.points.iter().zip(&sub.weights) {
                let mut q = [0.0; 3];
                for k in 0..3 {
                    q[k] = p[0] * c[0][k] + p[1] * c[1][k] + p[2] * c[2][k];
                }
                points.push(q);
                weights.push(0.25 * w);
            }
        }
        TriangleRule { points, weights }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Gauss-Legendre nodes and weights on [0, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        // Newton on P_n from the Chebyshev guess
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = 0.5 * (1.0 - z);
        w[i] = 1.0 / ((1.0 - z * z) * dp * dp);
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap());
    (idx.iter().map(|&i| x[i]).collect(), idx.iter().map(|&i| w[i]).collect())
}

/// Affine geometry of one triangle.
#[derive(Debug, Clone, Copy)]
pub struct TriangleGeometry {
    pub vertices: [Point; 3],
    pub area: f64,
    /// Gradients of the barycentric coordinates.
    pub grad: [Point; 3],
}

impl TriangleGeometry {
    pub fn new(vertices: [Point; 3]) -> Result<Self, ElementError> {
        let [p0, p1, p2] = vertices;
        let det = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]);
        if det.abs() < 1e-300 {
            return Err(ElementError::Degenerate(0.5 * det));
        }
        let area = 0.5 * det.abs();
        let grad = [
            [(p1[1] - p2[1]) / det, (p2[0] - p1[0]) / det],
            [(p2[1] - p0[1]) / det, (p0[0] - p2[0]) / det],
            [(p0[1] - p1[1]) / det, (p1[0] - p0[0]) / det],
        ];
        Ok(TriangleGeometry { vertices, area, grad })
    }

    pub fn point(&self, bary: &[f64; 3]) -> Point {
        let v = &self.vertices;
        [
            bary[0] * v[0][0] + bary[1] * v[1][0] + bary[2] * v[2][0],
            bary[0] * v[0][1] + bary[1] * v[1][1] + bary[2] * v[2][1],
        ]
    }

    /// Barycentric coordinates of a physical point.
    pub fn barycentric(&self, x: Point) -> [f64; 3] {
        let v = &self.vertices;
        let mut l = [0.0; 3];
        for i in 0..3 {
            // l_i vanishes at v_{i+1}
            l[i] = self.grad[i][0] * (x[0] - v[(i + 1) % 3][0])
                + self.grad[i][1] * (x[1] - v[(i + 1) % 3][1]);
        }
        l
    }

    /// Local Whitney functions (times the orientation signs) at barycentric point.
    pub fn whitney(&self, bary: &[f64; 3], signs: &[f64; 3]) -> [Point; 3] {
        let mut w = [[0.0; 2]; 3];
        for (k, &(i, j)) in LOCAL_EDGES.iter().enumerate() {
            let gi = self.grad[i];
            let gj = self.grad[j];
            w[k] = [
                signs[k] * (bary[i] * gj[0] - bary[j] * gi[0]),
                signs[k] * (bary[i] * gj[1] - bary[j] * gi[1]),
            ];
        }
        w
    }

    /// Constant curls of the local Whitney functions (times signs).
    pub fn whitney_curl(&self, signs: &[f64; 3]) -> [f64; 3] {
        let mut c = [0.0; 3];
        for (k, &(i, j)) in LOCAL_EDGES.iter().enumerate() {
            let gi = self.grad[i];
            let gj = self.grad[j];
            c[k] = signs[k] * 2.0 * (gi[0] * gj[1] - gi[1] * gj[0]);
        }
        c
    }
}

/// Reject coefficient samples that are not strictly positive.
pub fn check_positive(value: f64, at: Point) -> Result<f64, ElementError> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(ElementError::NonPositiveCoefficient { value, x: at[0], y: at[1] })
    }
}

/// Element matrices with a scalar weight `c(x)` integrated by `rule`.
pub struct LocalMatrices;

impl LocalMatrices {
    /// `int c w_i . w_j`.
    pub fn edge_mass(
        g: &TriangleGeometry,
        signs: &[f64; 3],
        rule: &TriangleRule,
        c: &dyn Fn(Point) -> f64,
    ) -> [[f64; 3]; 3] {
        let mut m = [[0.0; 3]; 3];
        for (b, &wq) in rule.points.iter().zip(&rule.weights) {
            let cv = c(g.point(b)) * wq * g.area;
            let w = g.whitney(b, signs);
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] += cv * (w[i][0] * w[j][0] + w[i][1] * w[j][1]);
                }
            }
        }
        m
    }

    /// `int c curl w_i curl w_j`.
    pub fn edge_curlcurl(
        g: &TriangleGeometry,
        signs: &[f64; 3],
        rule: &TriangleRule,
        c: &dyn Fn(Point) -> f64,
    ) -> [[f64; 3]; 3] {
        let cint: f64 = rule
            .points
            .iter()
            .zip(&rule.weights)
            .map(|(b, &w)| c(g.point(b)) * w)
            .sum::<f64>()
            * g.area;
        let k = g.whitney_curl(signs);
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = cint * k[i] * k[j];
            }
        }
        m
    }

    /// `int c l_i l_j`.
    pub fn nodal_mass(
        g: &TriangleGeometry,
        rule: &TriangleRule,
        c: &dyn Fn(Point) -> f64,
    ) -> [[f64; 3]; 3] {
        let mut m = [[0.0; 3]; 3];
        for (b, &wq) in rule.points.iter().zip(&rule.weights) {
            let cv = c(g.point(b)) * wq * g.area;
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] += cv * b[i] * b[j];
                }
            }
        }
        m
    }

    /// `int c grad l_i . grad l_j`.
    pub fn nodal_stiffness(
        g: &TriangleGeometry,
        rule: &TriangleRule,
        c: &dyn Fn(Point) -> f64,
    ) -> [[f64; 3]; 3] {
        let cint: f64 = rule
            .points
            .iter()
            .zip(&rule.weights)
            .map(|(b, &w)| c(g.point(b)) * w)
            .sum::<f64>()
            * g.area;
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = cint * (g.grad[i][0] * g.grad[j][0] + g.grad[i][1] * g.grad[j][1]);
            }
        }
        m
    }

    /// `int c w_i . grad l_j`.
    pub fn edge_grad(
        g: &TriangleGeometry,
        signs: &[f64; 3],
        rule: &TriangleRule,
        c: &dyn Fn(Point) -> f64,
    ) -> [[f64; 3]; 3] {
        let mut m = [[0.0; 3]; 3];
        for (b, &wq) in rule.points.iter().zip(&rule.weights) {
            let cv = c(g.point(b)) * wq * g.area;
            let w = g.whitney(b, signs);
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] += cv * (w[i][0] * g.grad[j][0] + w[i][1] * g.grad[j][1]);
                }
            }
        }
        m
    }

    /// Closed-form unit-weight edge mass, used to cross-check quadrature.
    pub fn edge_mass_exact(g: &TriangleGeometry, signs: &[f64; 3]) -> [[f64; 3]; 3] {
        let ll = |a: usize, b: usize| g.area * if a == b { 1.0 / 6.0 } else { 1.0 / 12.0 };
        let gg = |a: usize, b: usize| g.grad[a][0] * g.grad[b][0] + g.grad[a][1] * g.grad[b][1];
        let mut m = [[0.0; 3]; 3];
        for (p, &(i, j)) in LOCAL_EDGES.iter().enumerate() {
            for (q, &(k, l)) in LOCAL_EDGES.iter().enumerate() {
                m[p][q] = signs[p]
                    * signs[q]
                    * (ll(i, k) * gg(j, l) - ll(i, l) * gg(j, k) - ll(j, k) * gg(i, l)
                        + ll(j, l) * gg(i, k));
            }
        }
        m
    }
}

/// Edge degrees of freedom `int_e v . t ds` of a vector field, with Gauss points on the edge.
pub fn edge_circulation(v: &dyn Fn(Point) -> Point, start: Point, tangent: Point, n_gauss: usize) -> f64 {
    let (xs, ws) = gauss_legendre(n_gauss);
    xs.iter()
        .zip(&ws)
        .map(|(&s, &w)| {
            let p = [start[0] + s * tangent[0], start[1] + s * tangent[1]];
            let f = v(p);
            w * (f[0] * tangent[0] + f[1] * tangent[1])
        })
        .sum()
}
