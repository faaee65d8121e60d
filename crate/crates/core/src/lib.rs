//! Robust image reconstruction from blurred data with mixed Poisson-Gaussian
//! noise and outliers.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod counters;
pub mod error;
pub mod gcv;
pub mod grid;
pub mod io;
pub mod objective;
pub mod operators;
pub mod precond;
pub mod solver;
pub mod testbed;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use gcv::{gcv_eval, minimize_gcv, GcvEvaluation, GcvOptions, GcvSearch};
pub use grid::{Image, Spectrum};
pub use operators::{BlurOperator, LaplacianSymbol, StackedVector};
pub use objective::{Loss, LossKind, Objective, WeightReport};
pub use precond::Preconditioner;
pub use solver::{projected_newton, SolverOptions, SolverReport, Termination};
