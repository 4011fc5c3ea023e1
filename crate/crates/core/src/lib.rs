//! Two-scale finite element solver for the Maxwell wave equation with
//! rapidly oscillating coefficients in two dimensions.
//!
//! The macroscopic field `u0` lives in lowest-order edge elements on the unit
//! square D; the microscopic correctors live on the periodic unit cell Y and
//! are discretized in full or sparse tensor-product spaces over D x Y.

// `!(x > 0.0)` is used on purpose so that NaN fails the check
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod elements;
pub mod fields;
pub mod homogenize;
pub mod linalg;
pub mod mesh2d;
pub mod postproc;
pub mod problems;
pub mod reference;
pub mod spaces;
pub mod tensor;
pub mod timestepper;
