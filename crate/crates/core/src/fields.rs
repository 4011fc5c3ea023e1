//! Scalar fields on D x Y written as finite sums of products `X(x) Y(y)`.

use std::fmt;
use std::sync::Arc;

use crate::mesh2d::Point;

pub type ScalarFn = Arc<dyn Fn(Point) -> f64 + Send + Sync>;
pub type TwoScaleFn = Arc<dyn Fn(Point, Point) -> f64 + Send + Sync>;

pub fn scalar_fn(f: impl Fn(Point) -> f64 + Send + Sync + 'static) -> ScalarFn {
    Arc::new(f)
}

pub fn constant_fn(c: f64) -> ScalarFn {
    Arc::new(move |_| c)
}

#[derive(Clone)]
pub struct SeparableTerm {
    pub x: ScalarFn,
    pub y: ScalarFn,
}

/// `sum_k X_k(x) Y_k(y)`.
#[derive(Clone, Default)]
pub struct SeparableField {
    pub terms: Vec<SeparableTerm>,
}

impl fmt::Debug for SeparableField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SeparableField({} terms)", self.terms.len())
    }
}

impl SeparableField {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn product(x: ScalarFn, y: ScalarFn) -> Self {
        SeparableField { terms: vec![SeparableTerm { x, y }] }
    }

    pub fn x_only(x: ScalarFn) -> Self {
        Self::product(x, constant_fn(1.0))
    }

    pub fn y_only(y: ScalarFn) -> Self {
        Self::product(constant_fn(1.0), y)
    }

    pub fn constant(c: f64) -> Self {
        Self::product(constant_fn(c), constant_fn(1.0))
    }

    pub fn eval(&self, x: Point, y: Point) -> f64 {
        self.terms.iter().map(|t| (t.x)(x) * (t.y)(y)).sum()
    }

    pub fn scaled(&self, c: f64) -> Self {
        SeparableField {
            terms: self
                .terms
                .iter()
                .map(|t| {
                    let x = t.x.clone();
                    SeparableTerm { x: Arc::new(move |p| c * x(p)), y: t.y.clone() }
                })
                .collect(),
        }
    }

    pub fn plus(&self, other: &Self) -> Self {
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        SeparableField { terms }
    }

    pub fn times(&self, other: &Self) -> Self {
        let mut terms = Vec::with_capacity(self.terms.len() * other.terms.len());
        for a in &self.terms {
            for b in &other.terms {
                let (ax, bx, ay, by) = (a.x.clone(), b.x.clone(), a.y.clone(), b.y.clone());
                terms.push(SeparableTerm {
                    x: Arc::new(move |p| ax(p) * bx(p)),
                    y: Arc::new(move |p| ay(p) * by(p)),
                });
            }
        }
        SeparableField { terms }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }
}

/// Two-component field with separable components.
#[derive(Clone, Debug, Default)]
pub struct SeparableVector(pub [SeparableField; 2]);

impl SeparableVector {
    pub fn eval(&self, x: Point, y: Point) -> Point {
        [self.0[0].eval(x, y), self.0[1].eval(x, y)]
    }

    pub fn plus(&self, o: &Self) -> Self {
        SeparableVector([self.0[0].plus(&o.0[0]), self.0[1].plus(&o.0[1])])
    }

    pub fn scaled(&self, c: f64) -> Self {
        SeparableVector([self.0[0].scaled(c), self.0[1].scaled(c)])
    }
}

/// A material coefficient on D x Y.
#[derive(Clone)]
pub enum Coefficient {
    Separable(SeparableField),
    General(TwoScaleFn),
}

impl fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coefficient::Separable(s) => write!(f, "Coefficient::{s:?}"),
            Coefficient::General(_) => write!(f, "Coefficient::General"),
        }
    }
}

impl Coefficient {
    pub fn eval(&self, x: Point, y: Point) -> f64 {
        match self {
            Coefficient::Separable(s) => s.eval(x, y),
            Coefficient::General(f) => f(x, y),
        }
    }

    pub fn as_separable(&self) -> Option<&SeparableField> {
        match self {
            Coefficient::Separable(s) => Some(s),
            Coefficient::General(_) => None,
        }
    }

    pub fn to_fn(&self) -> TwoScaleFn {
        match self {
            Coefficient::Separable(s) => {
                let s = s.clone();
                Arc::new(move |x, y| s.eval(x, y))
            }
            Coefficient::General(f) => f.clone(),
        }
    }
}
