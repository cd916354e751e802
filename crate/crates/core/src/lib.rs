//! Numerical laboratory for large solutions of Delta u = c u^{(n+2)/(n-2)}
//! in cones over axisymmetric spherical caps.
//!
//! The pipeline is `domain` (grids and operators) -> `rho` (blow-up profile
//! and weight) -> `spectral` (singular eigenproblem, Fredholm solves, index
//! set) -> `cone` (cylinder equations) -> `expansion` (decay expansion).

// `!(x > 0.0)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod cone;
pub mod domain;
pub mod error;
pub mod expansion;
pub mod linalg;
pub mod report;
pub mod rho;
pub mod spectral;
pub mod verify;

pub use error::{Error, Result};
