//! Subcommand bodies. Each writes plain files into the configured output
//! directory; every CSV starts with a `# pgdeblur <table> v1` line.

use std::fs::{self, File};
use std::path::Path;

use pgdeblur::counters::{self, OpCounts};
use pgdeblur::io::{write_pgm, write_raw, PgmEncoding};
use pgdeblur::operators::hessian_apply;
use pgdeblur::testbed::{self, build_instance, load_instance, relative_error, ProblemInstance};
use pgdeblur::{minimize_gcv, projected_newton, GcvOptions, Image, Preconditioner, SolverOptions};

use crate::config::{LossChoice, RunConfig};
use crate::error::CliError;

/// Column schemas, in file order. Changing one means bumping its version.
pub const ITERATIONS_COLUMNS: &[&str] =
    &["iter", "objective", "proj_grad_norm", "active", "pcg_iterations", "step_length", "fft2", "ifft2"];
pub const SUMMARY_COLUMNS: &[&str] = &[
    "loss",
    "beta",
    "lambda",
    "status",
    "termination",
    "iterations",
    "total_pcg_iterations",
    "fft2",
    "ifft2",
    "relative_error",
    "reason",
];
pub const GCV_TRACE_COLUMNS: &[&str] = &[
    "eval",
    "lambda",
    "gcv",
    "numerator",
    "trace",
    "trace_cg_iterations",
    "trace_cg_residual",
    "trace_reliable",
    "newton_iterations",
    "termination",
    "relative_error",
];
pub const SCAN_COLUMNS: &[&str] =
    &["loss", "beta", "outlier_fraction", "lambda", "relative_error", "iterations", "termination"];
pub const BENCH_STEP_COLUMNS: &[&str] =
    &["pcg_tol", "preconditioner", "newton_iter", "pcg_iterations", "fft2", "ifft2"];
pub const BENCH_SUMMARY_COLUMNS: &[&str] = &[
    "pcg_tol",
    "preconditioner",
    "newton_iterations",
    "total_pcg_iterations",
    "fft2",
    "ifft2",
    "termination",
    "relative_error",
];
pub const OPS_COLUMNS: &[&str] = &["operation", "frames", "fft2", "ifft2", "mults", "adds"];

struct Table {
    writer: csv::Writer<File>,
}

impl Table {
    fn create(dir: &Path, file: &str, name: &str, columns: &[&str]) -> Result<Self, CliError> {
        use std::io::Write;
        let path = dir.join(file);
        let mut f = File::create(&path).map_err(|e| CliError::io(format!("creating {}", path.display()), e))?;
        writeln!(f, "# pgdeblur {name} v1").map_err(|e| CliError::io(format!("writing {}", path.display()), e))?;
        let mut writer = csv::Writer::from_writer(f);
        writer.write_record(columns)?;
        Ok(Self { writer })
    }

    fn row(&mut self, fields: &[String]) -> Result<(), CliError> {
        self.writer.write_record(fields)?;
        Ok(())
    }

    fn finish(mut self) -> Result<(), CliError> {
        self.writer.flush().map_err(|e| CliError::io("flushing csv", e))
    }
}

fn out_dir(cfg: &RunConfig) -> Result<&Path, CliError> {
    fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(format!("creating {}", cfg.out.display()), e))?;
    Ok(&cfg.out)
}

fn instance(cfg: &RunConfig) -> Result<ProblemInstance, CliError> {
    Ok(match &cfg.instance {
        Some(dir) => load_instance(dir)?,
        None => build_instance(&cfg.instance_spec())?,
    })
}

fn beta_str(beta: f64) -> String {
    if beta.is_infinite() {
        "inf".into()
    } else {
        beta.to_string()
    }
}

fn write_image(dir: &Path, stem: &str, x: &Image) -> Result<(), CliError> {
    write_raw(&dir.join(stem), x)?;
    write_pgm(&dir.join(format!("{stem}.pgm")), x, 255, PgmEncoding::Binary)?;
    Ok(())
}

pub fn generate(cfg: &RunConfig) -> Result<(), CliError> {
    let inst = build_instance(&cfg.instance_spec())?;
    testbed::save_instance(&inst, out_dir(cfg)?)?;
    println!("wrote instance to {} ({} outliers)", cfg.out.display(), inst.outlier_count());
    Ok(())
}

pub fn solve(cfg: &RunConfig) -> Result<(), CliError> {
    let inst = instance(cfg)?;
    let dir = out_dir(cfg)?;
    let loss = cfg.loss_for(cfg.loss)?;
    let obj = inst.objective(loss, cfg.lambda)?;

    let mut iters = Table::create(dir, "iterations.csv", "solve-iterations", ITERATIONS_COLUMNS)?;
    let mut rows = Vec::new();
    let mut record = |r: &pgdeblur::solver::IterationRecord| {
        rows.push(vec![
            r.iteration.to_string(),
            r.objective.to_string(),
            r.proj_grad_norm.to_string(),
            r.active.to_string(),
            r.pcg_iterations.to_string(),
            r.step_length.map(|s| s.to_string()).unwrap_or_default(),
            r.ops.fft2.to_string(),
            r.ops.ifft2.to_string(),
        ]);
    };
    let result = projected_newton(&obj, &inst.initial_guess(), &cfg.solver, Some(&mut record));
    for r in &rows {
        iters.row(r)?;
    }
    iters.finish()?;

    let mut summary = Table::create(dir, "summary.csv", "solve-summary", SUMMARY_COLUMNS)?;
    let head = [cfg.loss.name().to_string(), beta_str(loss.beta()), cfg.lambda.to_string()];
    match result {
        Ok((x, report)) => {
            let err = relative_error(&x, &inst.x_true)?;
            write_image(dir, "x", &x)?;
            let mut row = head.to_vec();
            row.extend([
                "ok".into(),
                report.termination.as_str().into(),
                report.iterations.to_string(),
                report.total_pcg_iterations().to_string(),
                report.ops.fft2.to_string(),
                report.ops.ifft2.to_string(),
                err.to_string(),
                String::new(),
            ]);
            summary.row(&row)?;
            summary.finish()?;
            println!(
                "{}: {} after {} Newton steps, relative error {err:.4}",
                cfg.loss.name(),
                report.termination.as_str(),
                report.iterations
            );
            Ok(())
        }
        Err(e) => {
            let mut row = head.to_vec();
            row.extend(["failed".into(), String::new(), String::new(), String::new(), String::new(), String::new(), String::new(), e.to_string()]);
            summary.row(&row)?;
            summary.finish()?;
            Err(CliError::Solver(e.to_string()))
        }
    }
}

fn gcv_options(cfg: &RunConfig) -> GcvOptions {
    let mut opts = GcvOptions::new(cfg.gcv_lo, cfg.gcv_hi);
    opts.x_tol = cfg.gcv_x_tol;
    opts.inner_cg_tol = cfg.gcv_cg_tol;
    opts.inner_cg_maxit = cfg.gcv_cg_maxit;
    opts.probe_seed = cfg.gcv_probe_seed;
    opts.warm_start = cfg.gcv_warm_start;
    opts.solver = cfg.solver.clone();
    opts
}

pub fn gcv(cfg: &RunConfig) -> Result<(), CliError> {
    let inst = instance(cfg)?;
    let dir = out_dir(cfg)?;
    let obj = inst.objective(cfg.loss_for(cfg.loss)?, cfg.gcv_lo)?;
    let search = minimize_gcv(&obj, &inst.initial_guess(), &gcv_options(cfg))?;

    let mut trace = Table::create(dir, "gcv_trace.csv", "gcv-trace", GCV_TRACE_COLUMNS)?;
    for (i, e) in search.evaluations.iter().enumerate() {
        trace.row(&[
            i.to_string(),
            e.lambda.to_string(),
            e.gcv_value.to_string(),
            e.numerator.to_string(),
            e.trace_estimate.value.to_string(),
            e.trace_estimate.cg_iterations.to_string(),
            e.trace_estimate.cg_relative_residual.to_string(),
            e.trace_estimate.reliable.to_string(),
            e.newton_report.iterations.to_string(),
            e.newton_report.termination.as_str().to_string(),
            relative_error(&e.solution, &inst.x_true)?.to_string(),
        ])?;
    }
    trace.finish()?;

    let best = search.best();
    fs::write(dir.join("lambda_star.txt"), format!("{}\n", search.lambda_star))
        .map_err(|e| CliError::io("writing lambda_star.txt", e))?;
    if cfg.gcv_solve {
        write_image(dir, "x", &best.solution)?;
    }
    println!(
        "lambda_star {} after {} evaluations, relative error {:.4}",
        search.lambda_star,
        search.evaluations.len(),
        relative_error(&best.solution, &inst.x_true)?
    );
    Ok(())
}

pub fn scan(cfg: &RunConfig) -> Result<(), CliError> {
    let grid = cfg.scan_grid()?;
    let dir = out_dir(cfg)?;
    let instances: Vec<ProblemInstance> = match &cfg.instance {
        Some(path) => vec![load_instance(path)?],
        None => cfg
            .scan_fractions
            .iter()
            .map(|&f| {
                let mut spec = cfg.instance_spec();
                spec.outlier_fraction = f;
                build_instance(&spec)
            })
            .collect::<Result<_, _>>()?,
    };

    let mut table = Table::create(dir, "scan.csv", "scan", SCAN_COLUMNS)?;
    for inst in &instances {
        let fraction = inst.corruption.map_or(0.0, |c| c.fraction);
        for &choice in &cfg.scan_losses {
            let loss = cfg.loss_for(choice)?;
            let points = testbed::lambda_scan(inst, loss, &grid, &cfg.solver)?;
            for p in points {
                table.row(&[
                    choice.name().to_string(),
                    beta_str(loss.beta()),
                    fraction.to_string(),
                    p.lambda.to_string(),
                    p.relative_error.to_string(),
                    p.iterations.to_string(),
                    p.termination.as_str().to_string(),
                ])?;
            }
        }
    }
    table.finish()?;
    println!("wrote {} scan rows", instances.len() * cfg.scan_losses.len() * grid.len());
    Ok(())
}

fn measured_ops(inst: &ProblemInstance, lambda: f64, loss_choice: LossChoice, cfg: &RunConfig) -> Result<(OpCounts, OpCounts), CliError> {
    let obj = inst.objective(cfg.loss_for(loss_choice)?, lambda)?;
    let x = inst.initial_guess();
    let weights = obj.hessian_weights(&x)?;
    let (hv, apply) = counters::measure(|| hessian_apply(obj.op(), obj.laplacian(), &weights.d, lambda, &x));
    hv?;
    let m = Preconditioner::build(obj.op(), obj.laplacian(), &weights.d, lambda)?;
    let (sv, solve) = counters::measure(|| m.solve(&x));
    sv?;
    Ok((apply, solve))
}

pub fn bench_precond(cfg: &RunConfig) -> Result<(), CliError> {
    let inst = instance(cfg)?;
    let dir = out_dir(cfg)?;
    let obj = inst.objective(cfg.loss_for(cfg.loss)?, cfg.lambda)?;
    let x0 = inst.initial_guess();

    let mut steps = Table::create(dir, "bench_steps.csv", "bench-steps", BENCH_STEP_COLUMNS)?;
    let mut summary = Table::create(dir, "bench_summary.csv", "bench-summary", BENCH_SUMMARY_COLUMNS)?;
    for &tol in &cfg.bench_pcg_tols {
        for use_precond in [true, false] {
            let opts = SolverOptions { pcg_tol: tol, use_preconditioner: use_precond, ..cfg.solver.clone() };
            let (x, report) = projected_newton(&obj, &x0, &opts, None)?;
            for r in report.records.iter().filter(|r| r.step_length.is_some()) {
                steps.row(&[
                    tol.to_string(),
                    use_precond.to_string(),
                    r.iteration.to_string(),
                    r.pcg_iterations.to_string(),
                    r.ops.fft2.to_string(),
                    r.ops.ifft2.to_string(),
                ])?;
            }
            summary.row(&[
                tol.to_string(),
                use_precond.to_string(),
                report.iterations.to_string(),
                report.total_pcg_iterations().to_string(),
                report.ops.fft2.to_string(),
                report.ops.ifft2.to_string(),
                report.termination.as_str().to_string(),
                relative_error(&x, &inst.x_true)?.to_string(),
            ])?;
            println!(
                "pcg_tol {tol} preconditioner {use_precond}: {} inner iterations over {} Newton steps",
                report.total_pcg_iterations(),
                report.iterations
            );
        }
    }
    steps.finish()?;
    summary.finish()?;

    let (apply, solve) = measured_ops(&inst, cfg.lambda, cfg.loss, cfg)?;
    let mut ops = Table::create(dir, "ops_per_apply.csv", "ops-per-apply", OPS_COLUMNS)?;
    for (name, c) in [("hessian_apply", apply), ("preconditioner_solve", solve)] {
        ops.row(&[
            name.to_string(),
            inst.frame_count().to_string(),
            c.fft2.to_string(),
            c.ifft2.to_string(),
            c.mults.to_string(),
            c.adds.to_string(),
        ])?;
    }
    ops.finish()
}
