use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("inverse transform left imaginary residue {residue:e} (relative to norm {norm:e})")]
    ImaginaryResidue { residue: f64, norm: f64 },

    #[error("psf center ({row}, {col}) lies outside a {height}x{width} grid")]
    CenterOutsideGrid {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },

    #[error("weight entry {index} is negative or not finite ({value})")]
    InvalidWeight { index: usize, value: f64 },

    #[error("iterate is infeasible: entry {index} = {value}")]
    Infeasible { index: usize, value: f64 },

    #[error("model variance [Ax]+sigma^2 = {value} at entry {index} is invalid")]
    InvalidDenominator { index: usize, value: f64 },

    #[error("all hessian weights vanish; preconditioner is undefined")]
    AllWeightsZero,

    #[error("projected PCG breakdown at iteration {iteration}: curvature {curvature:e}")]
    PcgBreakdown { iteration: usize, curvature: f64 },

    #[error("line search found no decrease after {halvings} halvings")]
    LineSearchFailed { halvings: usize },

    #[error("loss {0} is not supported by the solver (only Talwar is)")]
    UnsupportedLoss(&'static str),

    #[error("frame index {index} out of range for {frames} frames")]
    FrameIndex { index: usize, frames: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub(crate) fn dims_mismatch(expected: (usize, usize), got: (usize, usize)) -> Error {
    Error::DimensionMismatch {
        expected: format!("{}x{}", expected.0, expected.1),
        got: format!("{}x{}", got.0, got.1),
    }
}
