//! Robust generalized cross validation for choosing `λ`.
//!
//! `GCV(λ) = m‖W r_λ‖² / (trace(I − A_λ))²` with the saturating weight matrix
//! `W`, a Rademacher estimate of the trace, and the influence matrix applied
//! through truncated projected CG.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::Image;
use crate::objective::Objective;
use crate::operators::{hessian_apply, StackedVector};
use crate::solver::{pcg_run, projected_newton, SolverOptions, SolverReport};

#[derive(Debug, Clone, PartialEq)]
pub struct GcvOptions {
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    /// Absolute tolerance on the minimizing `λ`.
    pub x_tol: f64,
    pub inner_cg_tol: f64,
    pub inner_cg_maxit: usize,
    pub probe_seed: u64,
    /// Cap on GCV evaluations during the bounded search.
    pub max_evaluations: usize,
    /// Start each Newton solve from the previous evaluation's solution
    /// instead of the caller's initial guess.
    pub warm_start: bool,
    pub solver: SolverOptions,
}

impl GcvOptions {
    pub fn new(lambda_lo: f64, lambda_hi: f64) -> Self {
        Self {
            lambda_lo,
            lambda_hi,
            x_tol: 1e-8,
            inner_cg_tol: 1e-4,
            inner_cg_maxit: 150,
            probe_seed: 0,
            max_evaluations: 500,
            warm_start: false,
            solver: SolverOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_lo >= 0.0) || !(self.lambda_hi >= self.lambda_lo) || !self.lambda_hi.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "GCV bracket must satisfy 0 <= lo <= hi < inf, got [{}, {}]",
                self.lambda_lo, self.lambda_hi
            )));
        }
        if !(self.x_tol > 0.0) || !(self.inner_cg_tol > 0.0) {
            return Err(Error::InvalidParameter("GCV tolerances must be positive".into()));
        }
        if self.inner_cg_maxit == 0 || self.max_evaluations == 0 {
            return Err(Error::InvalidParameter("GCV iteration caps must be at least 1".into()));
        }
        self.solver.validate()
    }
}

/// `vᵀv − vᵀA_λv` for one probe `v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEstimate {
    pub value: f64,
    pub cg_iterations: usize,
    pub cg_relative_residual: f64,
    /// False when the inner CG broke down on a singular projected system.
    pub reliable: bool,
}

#[derive(Debug, Clone)]
pub struct GcvEvaluation {
    pub lambda: f64,
    pub gcv_value: f64,
    /// `m‖W r_λ‖²`
    pub numerator: f64,
    pub trace_estimate: TraceEstimate,
    pub newton_report: SolverReport,
    pub solution: Image,
}

/// Rademacher vector (entries ±1 with equal probability) of length `len`.
pub fn rademacher(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
}

/// Hutchinson estimate `mean_k v_kᵀ M v_k` over `probes` Rademacher vectors.
pub fn hutchinson<F>(apply: F, n: usize, probes: usize, seed: u64) -> f64
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..probes {
        let v = rademacher(n, rng.random());
        let mv = apply(&v);
        total += v.iter().zip(&mv).map(|(a, b)| a * b).sum::<f64>();
    }
    total / probes as f64
}

fn probe_stack(obj: &Objective, seed: u64) -> StackedVector {
    let (h, w) = obj.dims();
    let v = rademacher(obj.op().rows(), seed);
    let frames = v
        .chunks(h * w)
        .map(|c| Image::new(h, w, c.to_vec()).expect("finite probe"))
        .collect();
    StackedVector::new(frames).expect("consistent probe frames")
}

/// `W_ii = 1/√([Ax]_i + σ²)` on inliers, `β/([Ax]_i − b_i)` on saturated entries.
pub fn robust_weight_matrix(obj: &Objective, x: &Image) -> Result<StackedVector> {
    let t = obj.scaled_residual(x)?;
    let ax = obj.op().apply(x)?;
    let beta = obj.loss().beta();
    let loss = *obj.loss();
    let r = ax.zip_map(obj.data(), |a, b| a - b);
    let mut frames = Vec::with_capacity(t.frame_count());
    for ((tj, rj), aj) in t.frames().iter().zip(r.frames()).zip(ax.frames()) {
        let mut wj = Image::zeros(tj.height(), tj.width());
        for (((w, &ti), &ri), &ai) in wj
            .as_mut_slice()
            .iter_mut()
            .zip(tj.as_slice())
            .zip(rj.as_slice())
            .zip(aj.as_slice())
        {
            *w = if loss.is_inlier(ti) {
                let u = (ai + obj.sigma() * obj.sigma()).max(crate::objective::VARIANCE_FLOOR);
                1.0 / u.sqrt()
            } else {
                beta / ri
            };
        }
        frames.push(wj);
    }
    StackedVector::new(frames)
}

/// Trace term `vᵀv − vᵀ(W A y)` with `y` from truncated projected CG on
/// `D_λ(AᵀW²A + λLᵀL)D_λ y = D_λAᵀW v`, `D_λ` the indicator of `x > 0`.
pub fn trace_term(obj: &Objective, x: &Image, probe: &StackedVector, opts: &GcvOptions) -> Result<TraceEstimate> {
    probe.check_shape(obj.op().frame_count(), obj.dims())?;
    let w = robust_weight_matrix(obj, x)?;
    let w2 = w.map(|v| v * v);
    let wv = w.zip_map(probe, |a, b| a * b);
    let rhs = obj.op().apply_adjoint(&wv)?;
    let active: Vec<bool> = x.as_slice().iter().map(|&v| !(v > 0.0)).collect();
    let hess = |s: &Image| hessian_apply(obj.op(), obj.laplacian(), &w2, obj.lambda(), s);
    let (out, breakdown) = pcg_run(
        hess,
        &rhs,
        &active,
        None::<fn(&Image) -> Result<Image>>,
        opts.inner_cg_tol,
        opts.inner_cg_maxit,
    )?;
    let way = w.zip_map(&obj.op().apply(&out.solution)?, |a, b| a * b);
    Ok(TraceEstimate {
        value: probe.norm_sq() - probe.dot(&way),
        cg_iterations: out.iterations,
        cg_relative_residual: out.relative_residual,
        reliable: breakdown.is_none(),
    })
}

/// `m‖W r‖²` at `x`.
pub fn gcv_numerator(obj: &Objective, x: &Image) -> Result<f64> {
    let w = robust_weight_matrix(obj, x)?;
    let r = obj.op().apply(x)?.zip_map(obj.data(), |a, b| a - b);
    let wr = w.zip_map(&r, |a, b| a * b);
    Ok(obj.op().rows() as f64 * wr.norm_sq())
}

fn eval_with_probe(
    obj: &Objective,
    lambda: f64,
    warm_start: &Image,
    probe: &StackedVector,
    opts: &GcvOptions,
) -> Result<GcvEvaluation> {
    let at = obj.with_lambda(lambda)?;
    let (x, report) = projected_newton(&at, warm_start, &opts.solver, None)?;
    let numerator = gcv_numerator(&at, &x)?;
    let trace = trace_term(&at, &x, probe, opts)?;
    Ok(GcvEvaluation {
        lambda,
        gcv_value: numerator / (trace.value * trace.value),
        numerator,
        trace_estimate: trace,
        newton_report: report,
        solution: x,
    })
}

/// Solves at `lambda` from `warm_start` and evaluates the GCV functional.
pub fn gcv_eval(obj: &Objective, lambda: f64, warm_start: &Image, opts: &GcvOptions) -> Result<GcvEvaluation> {
    opts.validate()?;
    let probe = probe_stack(obj, opts.probe_seed);
    eval_with_probe(obj, lambda, warm_start, &probe, opts)
}

#[derive(Debug, Clone)]
pub struct GcvSearch {
    pub lambda_star: f64,
    /// Evaluations in the order performed.
    pub evaluations: Vec<GcvEvaluation>,
}

impl GcvSearch {
    /// The evaluation at `lambda_star`.
    pub fn best(&self) -> &GcvEvaluation {
        self.evaluations
            .iter()
            .find(|e| e.lambda == self.lambda_star)
            .expect("minimizer was evaluated")
    }
}

/// Bounded minimization of `λ ↦ GCV(λ)` over `[lambda_lo, lambda_hi]`.
///
/// One probe is drawn from `probe_seed` and reused; each Newton solve is
/// warm-started from the previous evaluation's solution.
pub fn minimize_gcv(obj: &Objective, x0: &Image, opts: &GcvOptions) -> Result<GcvSearch> {
    opts.validate()?;
    let probe = probe_stack(obj, opts.probe_seed);
    let mut evaluations: Vec<GcvEvaluation> = Vec::new();
    let mut warm = x0.clone();
    let (lambda_star, _, _) = fminbound(
        |lambda| {
            let e = eval_with_probe(obj, lambda, &warm, &probe, opts)?;
            if opts.warm_start {
                warm = e.solution.clone();
            }
            let v = e.gcv_value;
            evaluations.push(e);
            Ok(v)
        },
        opts.lambda_lo,
        opts.lambda_hi,
        opts.x_tol,
        opts.max_evaluations,
    )?;
    Ok(GcvSearch { lambda_star, evaluations })
}

/// Brent's bounded scalar minimization (golden section with parabolic steps).
///
/// Returns `(x, f(x), evaluations)`. A collapsed bracket `lo == hi` is
/// evaluated once and returned.
pub fn fminbound<F>(mut f: F, lo: f64, hi: f64, xatol: f64, max_evals: usize) -> Result<(f64, f64, usize)>
where
    F: FnMut(f64) -> Result<f64>,
{
    if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidParameter(format!("invalid bracket [{lo}, {hi}]")));
    }
    if lo == hi {
        return Ok((lo, f(lo)?, 1));
    }
    let golden_ratio = 0.5 * (3.0 - 5f64.sqrt());
    let sqrt_eps = f64::EPSILON.sqrt();
    let (mut a, mut b) = (lo, hi);
    let mut fulc = a + golden_ratio * (b - a);
    let mut nfc = fulc;
    let mut xf = fulc;
    let mut rat: f64 = 0.0;
    let mut e: f64 = 0.0;
    let mut fx = f(xf)?;
    let mut evals = 1;
    let mut ffulc = fx;
    let mut fnfc = fx;
    let mut xm = 0.5 * (a + b);
    let mut tol1 = sqrt_eps * xf.abs() + xatol / 3.0;
    let mut tol2 = 2.0 * tol1;

    let sign = |v: f64| if v >= 0.0 { 1.0 } else { -1.0 };
    while (xf - xm).abs() > tol2 - 0.5 * (b - a) && evals < max_evals {
        let mut golden = true;
        if e.abs() > tol1 {
            golden = false;
            let mut r = (xf - nfc) * (fx - ffulc);
            let mut q = (xf - fulc) * (fx - fnfc);
            let mut p = (xf - fulc) * q - (xf - nfc) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            r = e;
            e = rat;
            if p.abs() < (0.5 * q * r).abs() && p > q * (a - xf) && p < q * (b - xf) {
                rat = p / q;
                let x = xf + rat;
                if (x - a) < tol2 || (b - x) < tol2 {
                    rat = tol1 * sign(xm - xf);
                }
            } else {
                golden = true;
            }
        }
        if golden {
            e = if xf >= xm { a - xf } else { b - xf };
            rat = golden_ratio * e;
        }
        let x = xf + sign(rat) * rat.abs().max(tol1);
        let fu = f(x)?;
        evals += 1;
        if fu <= fx {
            if x >= xf {
                a = xf;
            } else {
                b = xf;
            }
            fulc = nfc;
            ffulc = fnfc;
            nfc = xf;
            fnfc = fx;
            xf = x;
            fx = fu;
        } else {
            if x < xf {
                a = x;
            } else {
                b = x;
            }
            if fu <= fnfc || nfc == xf {
                fulc = nfc;
                ffulc = fnfc;
                nfc = x;
                fnfc = fu;
            } else if fu <= ffulc || fulc == xf || fulc == nfc {
                fulc = x;
                ffulc = fu;
            }
        }
        xm = 0.5 * (a + b);
        tol1 = sqrt_eps * xf.abs() + xatol / 3.0;
        tol2 = 2.0 * tol1;
    }
    Ok((xf, fx, evals))
}
