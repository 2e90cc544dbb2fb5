//! Closed-form value functions for optimal stopping of a geometric Brownian
//! motion with multiplicative Poisson jumps.
//!
//! The continuation-region equation is a differential–difference equation.
//! It is solved one jump-interval at a time, starting at the threshold and
//! moving down. Each interval reduces to an Euler–Cauchy equation whose
//! forcing is a log-power sum. A Monte Carlo simulator of the state process
//! provides an independent check.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod charpoly;
pub mod cli;
pub mod error;
pub mod kv;
pub mod logpower;
pub mod particular;
pub mod rootfind;
pub mod simulate;
pub mod valuefn;

pub use charpoly::{derive_coeffs, q_roots, CharPoly, ModelParams, OdeCoeffs};
pub use error::{Error, Result};
pub use logpower::{LogPowerSum, LogPowerTerm};
pub use simulate::{simulate_paths, SimConfig, SimResult};
pub use valuefn::{fit_boundary, BoundaryFit, Convention, FitOptions, Payoff, PiecewiseValue};
