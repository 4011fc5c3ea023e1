//! Experiment driver for the two-scale Maxwell wave solver: configuration,
//! the convergence, cell, corrector and reference studies.

// `!(x > 0.0)` is used on purpose so that NaN fails the check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod expr;
pub mod studies;
