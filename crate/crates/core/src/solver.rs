//! Projected Newton with projected PCG inner solves for `min J_λ(x)` s.t. `x ≥ 0`.

use crate::counters::{self, OpCounts};
use crate::error::{Error, Result};
use crate::grid::Image;
use crate::objective::{check_feasible, LossKind, Objective};
use crate::operators::hessian_apply;
use crate::precond::Preconditioner;

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    /// Relative projected-gradient tolerance.
    pub newton_tol: f64,
    pub newton_maxit: usize,
    /// Relative projected-residual tolerance of the inner solve.
    pub pcg_tol: f64,
    pub pcg_maxit: usize,
    pub linesearch_max_halvings: usize,
    pub use_preconditioner: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            newton_tol: 1e-4,
            newton_maxit: 40,
            pcg_tol: 1e-1,
            pcg_maxit: 100,
            linesearch_max_halvings: 20,
            use_preconditioner: true,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.newton_tol >= 0.0) || !(self.pcg_tol >= 0.0) {
            return Err(Error::InvalidParameter("tolerances must be nonnegative".into()));
        }
        if self.newton_maxit == 0 || self.pcg_maxit == 0 {
            return Err(Error::InvalidParameter("iteration caps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIterations,
    LineSearchFailed,
    PcgBreakdown,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::MaxIterations => "max_iterations",
            Termination::LineSearchFailed => "linesearch_failed",
            Termination::PcgBreakdown => "pcg_breakdown",
        }
    }
}

/// State at Newton iterate `iteration`, and the work spent producing the next one.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub proj_grad_norm: f64,
    pub active: usize,
    /// Smallest entry of the iterate.
    pub min_entry: f64,
    /// Inner iterations of the step taken from this iterate (0 for the final one).
    pub pcg_iterations: usize,
    pub step_length: Option<f64>,
    /// Cumulative operation counts of the run so far.
    pub ops: OpCounts,
}

#[derive(Debug, Clone)]
pub struct SolverReport {
    /// Accepted Newton steps.
    pub iterations: usize,
    /// `J_λ` at the initial point and after each accepted step.
    pub objective_trace: Vec<f64>,
    pub proj_grad_norms: Vec<f64>,
    pub pcg_iterations: Vec<usize>,
    pub ops: OpCounts,
    pub termination: Termination,
    pub records: Vec<IterationRecord>,
}

impl SolverReport {
    pub fn total_pcg_iterations(&self) -> usize {
        self.pcg_iterations.iter().sum()
    }
}

/// `P(v) = v ⊙ (1 − active) + active ⊙ min(v, 0)`
pub fn projected_gradient_map(g: &Image, active: &[bool]) -> Image {
    debug_assert_eq!(g.len(), active.len());
    let mut out = g.clone();
    for (v, &a) in out.as_mut_slice().iter_mut().zip(active) {
        if a {
            *v = v.min(0.0);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct PcgOutcome {
    pub solution: Image,
    pub iterations: usize,
    pub relative_residual: f64,
}

fn mask_inactive(v: &mut Image, active: &[bool]) {
    for (x, &a) in v.as_mut_slice().iter_mut().zip(active) {
        if a {
            *x = 0.0;
        }
    }
}

/// Approximately solves `D_I H D_I s = D_I rhs`, `D_I = diag(1 − active)`.
///
/// Directions, residuals and iterates are kept exactly zero on active cells.
/// Stops once `‖r_k‖ ≤ tol·‖r_0‖` or after `maxit` iterations; nonpositive
/// curvature along a search direction is reported as a breakdown.
pub fn projected_pcg<H, M>(
    hess: H,
    rhs: &Image,
    active: &[bool],
    precond: Option<M>,
    tol: f64,
    maxit: usize,
) -> Result<PcgOutcome>
where
    H: Fn(&Image) -> Result<Image>,
    M: Fn(&Image) -> Result<Image>,
{
    let (outcome, breakdown) = pcg_run(hess, rhs, active, precond, tol, maxit)?;
    match breakdown {
        Some((iteration, curvature)) => Err(Error::PcgBreakdown { iteration, curvature }),
        None => Ok(outcome),
    }
}

/// Like [`projected_pcg`], but a breakdown returns the iterate reached so far
/// together with the offending `(iteration, curvature)`.
pub(crate) fn pcg_run<H, M>(
    hess: H,
    rhs: &Image,
    active: &[bool],
    precond: Option<M>,
    tol: f64,
    maxit: usize,
) -> Result<(PcgOutcome, Option<(usize, f64)>)>
where
    H: Fn(&Image) -> Result<Image>,
    M: Fn(&Image) -> Result<Image>,
{
    if active.len() != rhs.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} mask entries", rhs.len()),
            got: format!("{}", active.len()),
        });
    }
    let apply_precond = |r: &Image| -> Result<Image> {
        let mut z = match &precond {
            Some(m) => m(r)?,
            None => r.clone(),
        };
        mask_inactive(&mut z, active);
        Ok(z)
    };

    let (h, w) = rhs.dims();
    let mut x = Image::zeros(h, w);
    let mut r = rhs.clone();
    mask_inactive(&mut r, active);
    let r0 = r.norm();
    if r0 == 0.0 {
        return Ok((PcgOutcome { solution: x, iterations: 0, relative_residual: 0.0 }, None));
    }
    let mut z = apply_precond(&r)?;
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    let mut rel = 1.0;
    let mut k = 0;
    while k < maxit {
        let mut q = hess(&p)?;
        mask_inactive(&mut q, active);
        let curvature = p.dot(&q);
        if !(curvature > 0.0) {
            mask_inactive(&mut x, active);
            let outcome = PcgOutcome { solution: x, iterations: k, relative_residual: rel };
            return Ok((outcome, Some((k, curvature))));
        }
        let alpha = rz / curvature;
        x.axpy(alpha, &p);
        r.axpy(-alpha, &q);
        k += 1;
        let rn = r.norm();
        rel = rn / r0;
        if rel <= tol || rn == 0.0 {
            break;
        }
        z = apply_precond(&r)?;
        let rz_next = r.dot(&z);
        let beta = rz_next / rz;
        rz = rz_next;
        let mut p_next = z.clone();
        p_next.axpy(beta, &p);
        p = p_next;
    }
    mask_inactive(&mut x, active);
    Ok((PcgOutcome { solution: x, iterations: k, relative_residual: rel }, None))
}

#[derive(Debug, Clone)]
pub struct LineSearchStep {
    pub x: Image,
    pub objective: f64,
    pub step: f64,
}

/// Projected backtracking: first `α ∈ {1, 1/2, 1/4, …}` with `J(max(x + αs, 0)) < J(x)`.
pub fn linesearch(
    obj: &Objective,
    x: &Image,
    current: f64,
    s: &Image,
    max_halvings: usize,
) -> Result<LineSearchStep> {
    s.check_dims(x.dims())?;
    if s.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("search direction is not finite".into()));
    }
    let mut alpha = 1.0;
    for _ in 0..=max_halvings {
        let trial = x.zip_map(s, |xi, si| (xi + alpha * si).max(0.0));
        let value = obj.value(&trial)?;
        if value < current {
            return Ok(LineSearchStep { x: trial, objective: value, step: alpha });
        }
        alpha *= 0.5;
    }
    Err(Error::LineSearchFailed { halvings: max_halvings })
}

fn max_abs(v: impl Iterator<Item = f64>) -> f64 {
    v.fold(0.0, |m, x| m.max(x.abs()))
}

/// Projected Newton iteration from `x0 ≥ 0`.
///
/// `progress` is called once per visited iterate, including the last.
pub fn projected_newton(
    obj: &Objective,
    x0: &Image,
    opts: &SolverOptions,
    mut progress: Option<&mut dyn FnMut(&IterationRecord)>,
) -> Result<(Image, SolverReport)> {
    opts.validate()?;
    if obj.loss().kind() != LossKind::Talwar {
        return Err(Error::UnsupportedLoss(obj.loss().kind().name()));
    }
    x0.check_dims(obj.dims())?;
    check_feasible(x0)?;

    let start = counters::snapshot();
    let mut x = x0.clone();
    let mut state = obj.state(&x)?;
    let mut value = obj.value_at(&state)?;
    let mut report = SolverReport {
        iterations: 0,
        objective_trace: vec![value],
        proj_grad_norms: Vec::new(),
        pcg_iterations: Vec::new(),
        ops: OpCounts::default(),
        termination: Termination::MaxIterations,
        records: Vec::new(),
    };
    let mut pg0 = None;

    loop {
        let k = report.iterations;
        let active: Vec<bool> = x.as_slice().iter().map(|&v| v <= 0.0).collect();
        let weights = obj.weights_at(&state)?;
        let g = obj.gradient_at(&state, &weights)?;
        let pg = projected_gradient_map(&g, &active).norm();
        report.proj_grad_norms.push(pg);
        let reference = *pg0.get_or_insert(pg);

        let mut record = IterationRecord {
            iteration: k,
            objective: value,
            proj_grad_norm: pg,
            active: active.iter().filter(|a| **a).count(),
            min_entry: x.min(),
            pcg_iterations: 0,
            step_length: None,
            ops: counters::snapshot() - start,
        };
        let finish = |report: &mut SolverReport,
                      record: IterationRecord,
                      why: Termination,
                      progress: &mut Option<&mut dyn FnMut(&IterationRecord)>| {
            if let Some(cb) = progress.as_mut() {
                cb(&record);
            }
            report.records.push(record);
            report.termination = why;
            report.ops = counters::snapshot() - start;
        };

        if pg <= opts.newton_tol * reference {
            finish(&mut report, record, Termination::Converged, &mut progress);
            break;
        }
        if k >= opts.newton_maxit {
            finish(&mut report, record, Termination::MaxIterations, &mut progress);
            break;
        }

        let precond = if opts.use_preconditioner {
            match Preconditioner::build(obj.op(), obj.laplacian(), &weights.d, obj.lambda()) {
                Ok(m) => Some(m),
                Err(Error::AllWeightsZero) => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        let hess = |v: &Image| hessian_apply(obj.op(), obj.laplacian(), &weights.d, obj.lambda(), v);
        let rhs = g.scaled(-1.0);
        let inner = match &precond {
            Some(m) => projected_pcg(hess, &rhs, &active, Some(|r: &Image| m.solve(r)), opts.pcg_tol, opts.pcg_maxit),
            None => projected_pcg(hess, &rhs, &active, None::<fn(&Image) -> Result<Image>>, opts.pcg_tol, opts.pcg_maxit),
        };
        let inner = match inner {
            Ok(o) => o,
            Err(Error::PcgBreakdown { .. }) => {
                finish(&mut report, record, Termination::PcgBreakdown, &mut progress);
                break;
            }
            Err(e) => return Err(e),
        };
        let mut s = inner.solution;
        report.pcg_iterations.push(inner.iterations);
        record.pcg_iterations = inner.iterations;

        // Active cells follow the negative gradient, capped at the size of the Newton step.
        let s_max = max_abs(s.as_slice().iter().copied());
        let ga_max = max_abs(g.as_slice().iter().zip(&active).filter(|(_, a)| **a).map(|(v, _)| *v));
        let scale = if ga_max > s_max { s_max / ga_max } else { 1.0 };
        for ((si, gi), &a) in s.as_mut_slice().iter_mut().zip(g.as_slice()).zip(&active) {
            if a {
                *si = -gi * scale;
            }
        }

        match linesearch(obj, &x, value, &s, opts.linesearch_max_halvings) {
            Ok(step) => {
                record.step_length = Some(step.step);
                if let Some(cb) = progress.as_mut() {
                    cb(&record);
                }
                report.records.push(record);
                x = step.x;
                value = step.objective;
                state = obj.state(&x)?;
                report.objective_trace.push(value);
                report.iterations += 1;
            }
            Err(Error::LineSearchFailed { .. }) => {
                finish(&mut report, record, Termination::LineSearchFailed, &mut progress);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok((x, report))
}
