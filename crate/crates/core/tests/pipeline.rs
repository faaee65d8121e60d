use pgdeblur::solver::projected_gradient_map;
use pgdeblur::testbed::{
    build_instance, lambda_scan, load_instance, log_grid, relative_error, save_instance, InstanceSpec, TestProblem,
};
use pgdeblur::{projected_newton, BlurOperator, Image, Loss, Objective, SolverOptions, StackedVector, Termination};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_problem(n: usize, seed: u64, lambda: f64) -> (Objective, Image) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let psf = Image::from_fn(n, n, |_, _| rng.random_range(0.05..1.0));
    let psf = psf.scaled(1.0 / psf.sum());
    let op = BlurOperator::from_psfs(&[psf], (n / 2, n / 2)).unwrap();
    let truth = Image::from_fn(n, n, |r, c| if (r + c) % 3 == 0 { 0.0 } else { rng.random_range(0.0..80.0) });
    let clean = op.apply(&truth).unwrap().frames()[0].clone();
    let noisy = Image::from_fn(n, n, |r, c| clean.get(r, c) + rng.random_range(-4.0..4.0));
    let data = StackedVector::new(vec![noisy.clone()]).unwrap();
    let obj = Objective::new(op, data, 2.0, Loss::talwar(), lambda).unwrap();
    (obj, noisy.map(|v| v.max(0.0)))
}

#[test]
fn converged_point_satisfies_kkt() {
    let (obj, x0) = small_problem(8, 1, 1e-3);
    let opts = SolverOptions { newton_tol: 1e-10, newton_maxit: 200, pcg_tol: 1e-12, pcg_maxit: 500, ..Default::default() };
    let (x, report) = projected_newton(&obj, &x0, &opts, None).unwrap();
    assert_ne!(report.termination, Termination::MaxIterations);
    let g = obj.gradient(&x).unwrap();
    let scale = obj.gradient(&x0).unwrap().norm();
    for (&xi, &gi) in x.as_slice().iter().zip(g.as_slice()) {
        assert!(xi >= 0.0);
        if xi > 1e-8 {
            assert!(gi.abs() <= 1e-6 * scale, "interior gradient {gi}");
        } else {
            assert!(gi >= -1e-6 * scale, "bound gradient {gi}");
        }
    }
}

#[test]
fn saved_instance_reproduces_solution() {
    let spec = InstanceSpec {
        problem: TestProblem::CarbonAsh,
        size: 24,
        frames: 3,
        outlier_fraction: 0.05,
        added_object: true,
        ..InstanceSpec::default()
    };
    let inst = build_instance(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_instance(&inst, dir.path()).unwrap();
    let back = load_instance(dir.path()).unwrap();
    assert_eq!(back.observed, inst.observed);
    assert_eq!(back.outlier_mask, inst.outlier_mask);

    let opts = SolverOptions::default();
    let (a, _) = projected_newton(&inst.objective(Loss::talwar(), 1e-4).unwrap(), &inst.initial_guess(), &opts, None).unwrap();
    let (b, _) = projected_newton(&back.objective(Loss::talwar(), 1e-4).unwrap(), &back.initial_guess(), &opts, None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn extra_frames_help() {
    let errors: Vec<f64> = [1, 3]
        .into_iter()
        .map(|frames| {
            let inst = build_instance(&InstanceSpec { size: 32, frames, ..InstanceSpec::default() }).unwrap();
            let (x, _) = projected_newton(
                &inst.objective(Loss::talwar(), 3e-5).unwrap(),
                &inst.initial_guess(),
                &SolverOptions::default(),
                None,
            )
            .unwrap();
            relative_error(&x, &inst.x_true).unwrap()
        })
        .collect();
    assert!(errors[1] < errors[0], "{errors:?}");
}

#[test]
fn scan_rows_follow_grid() {
    let inst = build_instance(&InstanceSpec { size: 16, ..InstanceSpec::default() }).unwrap();
    let grid = log_grid(1e-6, 1e-2, 4).unwrap();
    let rows = lambda_scan(&inst, Loss::talwar(), &grid, &SolverOptions::default()).unwrap();
    assert_eq!(rows.len(), 4);
    for (row, lambda) in rows.iter().zip(&grid) {
        assert_eq!(row.lambda, *lambda);
        assert!(row.relative_error.is_finite());
    }
    assert!(lambda_scan(&inst, Loss::talwar(), &[1e-3, 1e-4], &SolverOptions::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn iterates_stay_feasible_and_decrease(seed in 0u64..10_000, log_lambda in -6.0f64..0.0) {
        let (obj, x0) = small_problem(8, seed, 10f64.powf(log_lambda));
        let mut mins = Vec::new();
        let mut record = |r: &pgdeblur::solver::IterationRecord| mins.push(r.min_entry);
        let (x, report) = projected_newton(&obj, &x0, &SolverOptions::default(), Some(&mut record)).unwrap();
        prop_assert!(x.min() >= 0.0);
        prop_assert!(mins.iter().all(|m| *m >= 0.0));
        prop_assert_eq!(mins.len(), report.records.len());
        prop_assert!(report.objective_trace.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(report.iterations <= 40);
    }

    #[test]
    fn projected_gradient_never_points_out(values in proptest::collection::vec(-5.0f64..5.0, 1..40), flags in proptest::collection::vec(any::<bool>(), 40)) {
        let n = values.len();
        let g = Image::new(1, n, values.clone()).unwrap();
        let p = projected_gradient_map(&g, &flags[..n]);
        for i in 0..n {
            let expected = if flags[i] { values[i].min(0.0) } else { values[i] };
            prop_assert_eq!(p.as_slice()[i], expected);
        }
        prop_assert!(p.norm() <= g.norm());
    }

    #[test]
    fn log_grid_is_ascending(lo_exp in -12.0f64..-1.0, span in 0.5f64..8.0, n in 2usize..30) {
        let lo = 10f64.powf(lo_exp);
        let hi = lo * 10f64.powf(span);
        let grid = log_grid(lo, hi, n).unwrap();
        prop_assert_eq!(grid.len(), n);
        prop_assert_eq!(grid[n - 1], hi);
        prop_assert!((grid[0] - lo).abs() <= 1e-12 * lo);
        prop_assert!(grid.windows(2).all(|w| w[0] < w[1]));
    }
}
