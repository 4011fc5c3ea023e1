//! Problem data: coefficients, loads, initial data and, for the two built-in
//! examples, the exact homogenized solution with its correctors.
//!
//! Both examples use `g(y) = 1 + cos^2(2 pi y)` and coefficients of the form
//! `p(x) / (g(y1) g(y2))`, whose cell problems have closed-form solutions.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use crate::fields::{constant_fn, scalar_fn, Coefficient, ScalarFn, SeparableField, SeparableVector};
use crate::mesh2d::Point;

pub type VectorFn = Arc<dyn Fn(f64, Point) -> Point + Send + Sync>;
pub type InitialFn = Arc<dyn Fn(Point) -> Point + Send + Sync>;

/// Two-scale Maxwell wave problem with one micro scale.
#[derive(Clone)]
pub struct Problem {
    pub name: String,
    /// Stiffness coefficient (multiplies the curls).
    pub a: Coefficient,
    /// Inertia coefficient (multiplies the time derivatives).
    pub b: Coefficient,
    pub f: VectorFn,
    pub g0: InitialFn,
    pub g1: InitialFn,
    pub t_final: f64,
}

impl fmt::Debug for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Problem({}, a={:?}, b={:?}, T={})", self.name, self.a, self.b, self.t_final)
    }
}

/// Exact homogenized solution and correctors.
#[derive(Clone)]
pub struct ExactSolution {
    pub u0: VectorFn,
    pub dt_u0: VectorFn,
    pub curl_u0: Arc<dyn Fn(f64, Point) -> f64 + Send + Sync>,
    /// `curl_y u1` at time t.
    pub sigma: Arc<dyn Fn(f64) -> SeparableField + Send + Sync>,
    /// `grad_y frak_u1` at time t.
    pub grad_frak: Arc<dyn Fn(f64) -> SeparableVector + Send + Sync>,
    /// Homogenized coefficients.
    pub a0: Arc<dyn Fn(Point) -> f64 + Send + Sync>,
    pub b0: Arc<dyn Fn(Point) -> f64 + Send + Sync>,
}

impl fmt::Debug for ExactSolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ExactSolution")
    }
}

pub fn g(y: f64) -> f64 {
    let c = (2.0 * PI * y).cos();
    1.0 + c * c
}

fn inv_gg() -> ScalarFn {
    scalar_fn(|y| 1.0 / (g(y[0]) * g(y[1])))
}

/// `(2/3) g(y) - 1`, the derivative of the 1D cell corrector plus one minus one.
fn cell_slope(c: usize) -> ScalarFn {
    scalar_fn(move |y| 2.0 / 3.0 * g(y[c]) - 1.0)
}

/// Closed-form problem `id` (1 or 2).
pub fn example(id: u32) -> Option<(Problem, ExactSolution)> {
    let zero: InitialFn = Arc::new(|_| [0.0, 0.0]);
    let s2 = 2f64.sqrt();
    // x-parts of a, b, the homogenized a0, b0, the shape of u0 and its curl
    type P = Arc<dyn Fn(Point) -> f64 + Send + Sync>;
    type V = Arc<dyn Fn(Point) -> Point + Send + Sync>;
    let (ax, bx, a0, b0, shape, curl, curl_a0_curl): (P, P, P, P, V, P, V) = match id {
        1 => (
            Arc::new(|x| 1.0 / ((1.0 + x[0]) * (1.0 + x[1]))),
            Arc::new(|x| (1.0 + x[0]) * (1.0 + x[1])),
            Arc::new(|x| 4.0 / (9.0 * (1.0 + x[0]) * (1.0 + x[1]))),
            Arc::new(move |x| s2 * (1.0 + x[0]) * (1.0 + x[1]) / 3.0),
            Arc::new(|x| [x[0] * x[1] * (1.0 - x[1]), x[0] * x[1] * (1.0 - x[0])]),
            Arc::new(|x| x[1] - x[0]),
            // curl(a0 curl u0) for the shape; s = 4 (x2 - x1) / (9 (1+x1)(1+x2))
            Arc::new(|x| {
                [4.0 / (9.0 * (1.0 + x[1]) * (1.0 + x[1])), 4.0 / (9.0 * (1.0 + x[0]) * (1.0 + x[0]))]
            }),
        ),
        2 => (
            Arc::new(|x| (1.0 + x[0]) * (1.0 + x[1])),
            Arc::new(|x| 1.0 / ((1.0 + x[0]) * (1.0 + x[1]))),
            Arc::new(|x| 4.0 * (1.0 + x[0]) * (1.0 + x[1]) / 9.0),
            Arc::new(move |x| s2 / (3.0 * (1.0 + x[0]) * (1.0 + x[1]))),
            Arc::new(|x| [(1.0 + x[0]) * x[1] * (1.0 - x[1]), (1.0 + x[1]) * x[0] * (1.0 - x[0])]),
            Arc::new(|x| 3.0 * (x[1] - x[0])),
            // s = 4/3 (1+x1)(1+x2)(x2 - x1)
            Arc::new(|x| {
                [
                    4.0 / 3.0 * (1.0 + x[0]) * (2.0 * x[1] - x[0] + 1.0),
                    4.0 / 3.0 * (1.0 + x[1]) * (2.0 * x[0] - x[1] + 1.0),
                ]
            }),
        ),
        _ => return None,
    };

    let a = {
        let ax = ax.clone();
        Coefficient::Separable(SeparableField::product(Arc::new(move |x| ax(x)), inv_gg()))
    };
    let b = {
        let bx = bx.clone();
        Coefficient::Separable(SeparableField::product(Arc::new(move |x| bx(x)), inv_gg()))
    };
    // u0 = t^3 shape(x): f = b0 * 6 t shape + t^3 curl(a0 curl shape)
    let f: VectorFn = {
        let (b0, shape, cc) = (b0.clone(), shape.clone(), curl_a0_curl.clone());
        Arc::new(move |t, x| {
            let s = shape(x);
            let c = cc(x);
            let b = b0(x);
            [6.0 * t * b * s[0] + t.powi(3) * c[0], 6.0 * t * b * s[1] + t.powi(3) * c[1]]
        })
    };
    let problem = Problem { name: format!("example{id}"), a, b, f, g0: zero.clone(), g1: zero, t_final: 1.0 };

    let u0: VectorFn = {
        let shape = shape.clone();
        Arc::new(move |t, x| {
            let s = shape(x);
            [t.powi(3) * s[0], t.powi(3) * s[1]]
        })
    };
    let dt_u0: VectorFn = {
        let shape = shape.clone();
        Arc::new(move |t, x| {
            let s = shape(x);
            [3.0 * t * t * s[0], 3.0 * t * t * s[1]]
        })
    };
    let curl_u0 = {
        let curl = curl.clone();
        Arc::new(move |t: f64, x: Point| t.powi(3) * curl(x))
    };
    // curl_y u1 = (a0 / a - 1) curl u0 = (4 g g / 9 - 1) curl u0
    let sigma = {
        let curl = curl.clone();
        Arc::new(move |t: f64| {
            let curl = curl.clone();
            SeparableField::product(
                Arc::new(move |x| t.powi(3) * curl(x)),
                scalar_fn(|y| 4.0 * g(y[0]) * g(y[1]) / 9.0 - 1.0),
            )
        })
    };
    // grad_y frak = (u0_1 ((2/3) g(y1) - 1), u0_2 ((2/3) g(y2) - 1))
    let grad_frak = {
        let shape = shape.clone();
        Arc::new(move |t: f64| {
            let (s1, s2) = (shape.clone(), shape.clone());
            SeparableVector([
                SeparableField::product(Arc::new(move |x| t.powi(3) * s1(x)[0]), cell_slope(0)),
                SeparableField::product(Arc::new(move |x| t.powi(3) * s2(x)[1]), cell_slope(1)),
            ])
        })
    };
    let exact = ExactSolution { u0, dt_u0, curl_u0, sigma, grad_frak, a0, b0 };
    Some((problem, exact))
}

impl ExactSolution {
    /// `curl u0 + curl_y u1` as a separable field at time t.
    pub fn curl_total(&self, t: f64) -> SeparableField {
        let c = self.curl_u0.clone();
        SeparableField::x_only(Arc::new(move |x| c(t, x))).plus(&(self.sigma)(t))
    }

    /// `u0 + grad_y frak_u1` at time t.
    pub fn field_total(&self, t: f64) -> SeparableVector {
        let (u1, u2) = (self.u0.clone(), self.u0.clone());
        SeparableVector([
            SeparableField::x_only(Arc::new(move |x| u1(t, x)[0])),
            SeparableField::x_only(Arc::new(move |x| u2(t, x)[1])),
        ])
        .plus(&(self.grad_frak)(t))
    }
}

/// Constant-coefficient helper used by tests and the energy check.
pub fn unit_coefficient() -> Coefficient {
    Coefficient::Separable(SeparableField::product(constant_fn(1.0), constant_fn(1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of the homogenized operator applied to the exact u0.
    #[test]
    fn load_matches_homogenized_operator() {
        for id in [1, 2] {
            let (p, e) = example(id).unwrap();
            let h = 1e-4;
            for &x in &[[0.3, 0.7], [0.8, 0.1], [0.5, 0.5]] {
                for &t in &[0.4, 1.0] {
                    let u = |t: f64| (e.u0)(t, x);
                    let utt = [
                        (u(t + h)[0] - 2.0 * u(t)[0] + u(t - h)[0]) / (h * h),
                        (u(t + h)[1] - 2.0 * u(t)[1] + u(t - h)[1]) / (h * h),
                    ];
                    let s = |y: Point| (e.a0)(y) * (e.curl_u0)(t, y);
                    let ds2 = (s([x[0], x[1] + h]) - s([x[0], x[1] - h])) / (2.0 * h);
                    let ds1 = (s([x[0] + h, x[1]]) - s([x[0] - h, x[1]])) / (2.0 * h);
                    let b0 = (e.b0)(x);
                    let want = [b0 * utt[0] + ds2, b0 * utt[1] - ds1];
                    let got = (p.f)(t, x);
                    for c in 0..2 {
                        assert!((got[c] - want[c]).abs() < 1e-5 * (1.0 + want[c].abs()), "ex{id} {x:?} {t}");
                    }
                }
            }
        }
    }

    #[test]
    fn curl_matches_finite_differences() {
        for id in [1, 2] {
            let (_, e) = example(id).unwrap();
            let h = 1e-5;
            let x = [0.3, 0.6];
            let u = |y: Point| (e.u0)(0.9, y);
            let c = (u([x[0] + h, x[1]])[1] - u([x[0] - h, x[1]])[1]) / (2.0 * h)
                - (u([x[0], x[1] + h])[0] - u([x[0], x[1] - h])[0]) / (2.0 * h);
            assert!((c - (e.curl_u0)(0.9, x)).abs() < 1e-8);
        }
    }

    #[test]
    fn correctors_have_zero_cell_mean() {
        // midpoint sums over a uniform grid are exact for trigonometric polynomials
        for id in [1, 2] {
            let (_, e) = example(id).unwrap();
            let n = 64;
            let sig = (e.sigma)(1.0);
            let gf = (e.grad_frak)(1.0);
            let x = [0.2, 0.9];
            let (mut ms, mut mg) = (0.0, [0.0, 0.0]);
            for i in 0..n {
                for j in 0..n {
                    let y = [(i as f64 + 0.5) / n as f64, (j as f64 + 0.5) / n as f64];
                    ms += sig.eval(x, y);
                    let v = gf.eval(x, y);
                    mg[0] += v[0];
                    mg[1] += v[1];
                }
            }
            let w = 1.0 / (n * n) as f64;
            assert!((ms * w).abs() < 1e-12);
            assert!((mg[0] * w).abs() < 1e-12 && (mg[1] * w).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_example_is_none() {
        assert!(example(3).is_none());
    }
}
