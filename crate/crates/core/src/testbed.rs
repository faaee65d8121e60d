//! Synthetic test problems: PSFs, phantoms, mixed Poisson-Gaussian data,
//! outlier families, error metrics and `λ` scans.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::Image;
use crate::io::{read_raw, write_pgm, write_raw, PgmEncoding};
use crate::objective::{Loss, Objective};
use crate::operators::{BlurOperator, StackedVector};
use crate::solver::{projected_newton, SolverOptions, Termination};

/// Clean-data entries in `[-NEGATIVE_SLACK, 0)` are FFT round-off and are drawn as 0.
const NEGATIVE_SLACK: f64 = 1e-9;
const INSTANCE_FORMAT: &str = "pgdeblur-instance-v1";

/// Covariance `C = [[γ1², τ²], [τ², γ2²]]` of a Gaussian PSF, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPsfParams {
    pub gamma1: f64,
    pub gamma2: f64,
    pub tau: f64,
}

impl GaussianPsfParams {
    pub fn new(gamma1: f64, gamma2: f64, tau: f64) -> Result<Self> {
        let p = Self { gamma1, gamma2, tau };
        p.validate()?;
        Ok(p)
    }

    pub fn det(&self) -> f64 {
        (self.gamma1 * self.gamma2).powi(2) - self.tau.powi(4)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.gamma1.is_finite() && self.gamma2.is_finite() && self.tau.is_finite();
        if !finite || !(self.det() > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "PSF covariance is not positive definite: gamma1={}, gamma2={}, tau={}",
                self.gamma1, self.gamma2, self.tau
            )));
        }
        Ok(())
    }

    /// Same covariance with rows and columns exchanged.
    pub fn transposed(&self) -> Self {
        Self { gamma1: self.gamma2, gamma2: self.gamma1, tau: self.tau }
    }
}

/// PSF center used throughout the testbed: `(h/2, w/2)`.
pub fn psf_center(dims: (usize, usize)) -> (usize, usize) {
    (dims.0 / 2, dims.1 / 2)
}

fn gaussian_with_cross(params: GaussianPsfParams, dims: (usize, usize), cross_sign: f64) -> Result<Image> {
    params.validate()?;
    let (h, w) = dims;
    if h == 0 || w == 0 {
        return Err(Error::InvalidImage("PSF grid must be nonempty".into()));
    }
    let (cr, cc) = psf_center(dims);
    let det = params.det();
    let (g1, g2, t2) = (params.gamma1.powi(2), params.gamma2.powi(2), cross_sign * params.tau.powi(2));
    let norm = 1.0 / (2.0 * std::f64::consts::PI * det.sqrt());
    let psf = Image::from_fn(h, w, |r, c| {
        let s = r as f64 - cr as f64;
        let t = c as f64 - cc as f64;
        let quad = (g2 * s * s - 2.0 * t2 * s * t + g1 * t * t) / det;
        norm * (-0.5 * quad).exp()
    });
    let total = psf.sum();
    Ok(psf.scaled(1.0 / total))
}

/// Gaussian PSF on the grid centered at [`psf_center`], normalized to unit sum.
///
/// `s` is the row offset and `t` the column offset from the center.
pub fn gaussian_psf(params: GaussianPsfParams, dims: (usize, usize)) -> Result<Image> {
    gaussian_with_cross(params, dims, 1.0)
}

/// Horizontal motion blur of `length` pixels through the PSF center, unit sum.
pub fn motion_psf(dims: (usize, usize), length: usize) -> Result<Image> {
    let (h, w) = dims;
    if length == 0 || length > w || h == 0 {
        return Err(Error::InvalidParameter(format!("motion length {length} does not fit width {w}")));
    }
    let (cr, cc) = psf_center(dims);
    let start = cc as isize - (length as isize - 1) / 2;
    let mut psf = Image::zeros(h, w);
    for k in 0..length as isize {
        let c = (start + k).rem_euclid(w as isize) as usize;
        psf.set(cr, c, 1.0 / length as f64);
    }
    Ok(psf)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestProblem {
    /// Satellite-like scene; frames share one tilted Gaussian, transposed and mirrored.
    Satellite,
    /// Smooth blob scene; frames use Gaussians (4,2,2), (4,2,0), (2,4,0).
    CarbonAsh,
}

impl TestProblem {
    pub fn name(self) -> &'static str {
        match self {
            TestProblem::Satellite => "satellite",
            TestProblem::CarbonAsh => "carbon-ash",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "satellite" => Ok(TestProblem::Satellite),
            "carbon-ash" => Ok(TestProblem::CarbonAsh),
            other => Err(Error::InvalidParameter(format!(
                "unknown test problem {other:?} (expected satellite or carbon-ash)"
            ))),
        }
    }

    /// Up to three frame PSFs for this problem.
    pub fn psfs(self, dims: (usize, usize), frames: usize) -> Result<Vec<Image>> {
        if !(1..=3).contains(&frames) {
            return Err(Error::InvalidParameter(format!("frames must be 1, 2 or 3, got {frames}")));
        }
        let all = match self {
            TestProblem::Satellite => {
                let base = GaussianPsfParams::new(3.0, 1.5, 1.5)?;
                vec![
                    gaussian_psf(base, dims)?,
                    gaussian_psf(base.transposed(), dims)?,
                    gaussian_with_cross(base, dims, -1.0)?,
                ]
            }
            TestProblem::CarbonAsh => vec![
                gaussian_psf(GaussianPsfParams::new(4.0, 2.0, 2.0)?, dims)?,
                gaussian_psf(GaussianPsfParams::new(4.0, 2.0, 0.0)?, dims)?,
                gaussian_psf(GaussianPsfParams::new(2.0, 4.0, 0.0)?, dims)?,
            ],
        };
        Ok(all.into_iter().take(frames).collect())
    }

    /// Ground-truth scene scaled so its maximum is `max_intensity`.
    pub fn scene(self, dims: (usize, usize), max_intensity: f64) -> Result<Image> {
        let raw = match self {
            TestProblem::Satellite => satellite_phantom(dims),
            TestProblem::CarbonAsh => blob_phantom(dims, 7),
        };
        let top = raw.max();
        if !(top > 0.0) {
            return Err(Error::InvalidParameter(format!("grid {dims:?} too small for the {} scene", self.name())));
        }
        Ok(raw.scaled(max_intensity / top))
    }
}

fn in_box(u: f64, v: f64, (u0, u1): (f64, f64), (v0, v1): (f64, f64)) -> bool {
    u >= u0 && u <= u1 && v >= v0 && v <= v1
}

/// Body, two striped solar panels, a mast and a dish on a zero background.
pub fn satellite_phantom(dims: (usize, usize)) -> Image {
    let (h, w) = dims;
    Image::from_fn(h, w, |r, c| {
        let u = (r as f64 + 0.5) / h as f64;
        let v = (c as f64 + 0.5) / w as f64;
        if in_box(u, v, (0.42, 0.60), (0.40, 0.60)) {
            return 1.0;
        }
        let panel = in_box(u, v, (0.46, 0.56), (0.10, 0.37)) || in_box(u, v, (0.46, 0.56), (0.63, 0.90));
        if panel {
            let stripe = ((v * w as f64) as usize / 3) % 2;
            return if stripe == 0 { 0.55 } else { 0.75 };
        }
        if in_box(u, v, (0.34, 0.42), (0.485, 0.515)) {
            return 0.8;
        }
        let (du, dv) = (u - 0.29, v - 0.5);
        if du * du + dv * dv <= 0.07 * 0.07 {
            return 0.9;
        }
        0.0
    })
}

/// Smooth positive field: a sum of seeded anisotropic Gaussian blobs.
pub fn blob_phantom(dims: (usize, usize), seed: u64) -> Image {
    let (h, w) = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs: Vec<(f64, f64, f64, f64, f64)> = (0..14)
        .map(|_| {
            (
                rng.random_range(0.15..0.85),
                rng.random_range(0.15..0.85),
                rng.random_range(0.03..0.10),
                rng.random_range(0.03..0.10),
                rng.random_range(0.3..1.0),
            )
        })
        .collect();
    Image::from_fn(h, w, |r, c| {
        let u = (r as f64 + 0.5) / h as f64;
        let v = (c as f64 + 0.5) / w as f64;
        blobs
            .iter()
            .map(|&(cu, cv, su, sv, a)| a * (-0.5 * (((u - cu) / su).powi(2) + ((v - cv) / sv).powi(2))).exp())
            .sum()
    })
}

/// Small satellite in the upper-left corner, peak `max_intensity`.
pub fn small_object(dims: (usize, usize), max_intensity: f64) -> Image {
    let (h, w) = dims;
    let (r0, c0) = (h / 8, w / 8);
    let (bh, bw) = ((h / 32).max(1), (w / 32).max(1));
    Image::from_fn(h, w, |r, c| {
        let dr = r as isize - r0 as isize;
        let dc = c as isize - c0 as isize;
        if dr.unsigned_abs() <= bh && dc.unsigned_abs() <= bw {
            max_intensity
        } else if dr.unsigned_abs() <= bh / 2 && dc.unsigned_abs() <= 4 * bw {
            0.6 * max_intensity
        } else {
            0.0
        }
    })
}

fn frame_rng(seed: u64, frame: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame as u64);
    rng
}

fn poisson_draw(rng: &mut ChaCha8Rng, mean: f64, index: usize) -> Result<f64> {
    if !mean.is_finite() || mean < -NEGATIVE_SLACK {
        return Err(Error::InvalidParameter(format!("negative Poisson parameter {mean} at entry {index}")));
    }
    if mean <= 0.0 {
        return Ok(0.0);
    }
    let dist = Poisson::new(mean).map_err(|e| Error::InvalidParameter(format!("entry {index}: {e}")))?;
    Ok(dist.sample(rng))
}

/// `b_i = Pois([clean]_i) + σ·N(0,1)`; frame `j` draws from stream `j` of `noise_seed`.
pub fn simulate_from_clean(clean: &StackedVector, sigma: f64, noise_seed: u64) -> Result<StackedVector> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    let n = clean.dims().0 * clean.dims().1;
    let mut frames = Vec::with_capacity(clean.frame_count());
    for (j, cj) in clean.frames().iter().enumerate() {
        let mut rng = frame_rng(noise_seed, j);
        let mut out = Image::zeros(cj.height(), cj.width());
        for (i, (o, &m)) in out.as_mut_slice().iter_mut().zip(cj.as_slice()).enumerate() {
            let p = poisson_draw(&mut rng, m, j * n + i)?;
            let g: f64 = rng.sample(StandardNormal);
            *o = p + sigma * g;
        }
        frames.push(out);
    }
    StackedVector::new(frames)
}

/// Blurs `x_true` and draws mixed Poisson-Gaussian data.
pub fn simulate_data(x_true: &Image, op: &BlurOperator, sigma: f64, noise_seed: u64) -> Result<StackedVector> {
    simulate_from_clean(&op.apply(x_true)?, sigma, noise_seed)
}

/// Adds `uniform(0, ceiling)` to `⌊fraction·m⌋` distinct entries chosen uniformly.
///
/// The mask is frame-major and marks the corrupted entries.
pub fn inject_random_corruptions(
    b: &StackedVector,
    fraction: f64,
    ceiling: f64,
    outlier_seed: u64,
) -> Result<(StackedVector, Vec<bool>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidParameter(format!("outlier fraction must lie in [0, 1], got {fraction}")));
    }
    if !(ceiling >= 0.0) || !ceiling.is_finite() {
        return Err(Error::InvalidParameter(format!("outlier ceiling must be finite and >= 0, got {ceiling}")));
    }
    let m = b.len();
    let count = (fraction * m as f64).floor() as usize;
    let n = b.dims().0 * b.dims().1;
    let mut rng = ChaCha8Rng::seed_from_u64(outlier_seed);
    let mut out = b.clone();
    let mut mask = vec![false; m];
    for i in index::sample(&mut rng, m, count) {
        let add = rng.random::<f64>() * ceiling;
        let v = &mut out.frames_mut()[i / n].as_mut_slice()[i % n];
        *v += add;
        mask[i] = true;
    }
    Ok((out, mask))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corruption {
    pub fraction: f64,
    pub ceiling: f64,
}

#[derive(Debug, Clone)]
pub struct ProblemInstance {
    pub problem: TestProblem,
    pub x_true: Image,
    pub psfs: Vec<Image>,
    pub psf_center: (usize, usize),
    pub op: BlurOperator,
    /// `A x_true` plus any added-object signal.
    pub clean: StackedVector,
    pub added_signal: Option<StackedVector>,
    pub observed: StackedVector,
    /// Frame-major flags of randomly corrupted entries.
    pub outlier_mask: Vec<bool>,
    pub sigma: f64,
    pub noise_seed: u64,
    pub outlier_seed: u64,
    pub corruption: Option<Corruption>,
    /// Cumulative circular shift `(dx, dy)` applied to the scene.
    pub shift: (isize, isize),
}

/// Parameters for [`build_instance`].
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSpec {
    pub problem: TestProblem,
    pub size: usize,
    pub frames: usize,
    pub max_intensity: f64,
    pub sigma: f64,
    pub noise_seed: u64,
    pub outlier_seed: u64,
    pub outlier_fraction: f64,
    /// Defaults to `max(A x_true)`.
    pub outlier_ceiling: Option<f64>,
    /// Adds the motion-blurred small object to frame 0.
    pub added_object: bool,
    pub shift: (isize, isize),
}

impl Default for InstanceSpec {
    fn default() -> Self {
        Self {
            problem: TestProblem::Satellite,
            size: 64,
            frames: 1,
            max_intensity: 255.0,
            sigma: 5.0,
            noise_seed: 1,
            outlier_seed: 2,
            outlier_fraction: 0.0,
            outlier_ceiling: None,
            added_object: false,
            shift: (0, 0),
        }
    }
}

pub fn build_instance(spec: &InstanceSpec) -> Result<ProblemInstance> {
    if spec.size < 8 {
        return Err(Error::InvalidParameter(format!("size must be at least 8, got {}", spec.size)));
    }
    if !(spec.max_intensity > 0.0) || !spec.max_intensity.is_finite() {
        return Err(Error::InvalidParameter(format!("max intensity must be positive, got {}", spec.max_intensity)));
    }
    let dims = (spec.size, spec.size);
    let psfs = spec.problem.psfs(dims, spec.frames)?;
    let center = psf_center(dims);
    let op = BlurOperator::from_psfs(&psfs, center)?;
    let x_true = spec.problem.scene(dims, spec.max_intensity)?;
    let clean = op.apply(&x_true)?;
    let observed = simulate_from_clean(&clean, spec.sigma, spec.noise_seed)?;
    let mut inst = ProblemInstance {
        problem: spec.problem,
        x_true,
        psfs,
        psf_center: center,
        op,
        clean,
        added_signal: None,
        observed,
        outlier_mask: vec![false; spec.frames * spec.size * spec.size],
        sigma: spec.sigma,
        noise_seed: spec.noise_seed,
        outlier_seed: spec.outlier_seed,
        corruption: None,
        shift: (0, 0),
    };
    if spec.shift != (0, 0) {
        inst = shift_scene(&inst, spec.shift.0, spec.shift.1)?;
    }
    if spec.added_object {
        let object = small_object(dims, spec.max_intensity);
        let motion = motion_psf(dims, (spec.size / 8).max(2))?;
        inst = inject_added_object(&inst, &object, &motion, 0)?;
    }
    if spec.outlier_fraction > 0.0 {
        let ceiling = match spec.outlier_ceiling {
            Some(c) => c,
            None => inst.op.apply(&inst.x_true)?.max(),
        };
        inst.corruption = Some(Corruption { fraction: spec.outlier_fraction, ceiling });
        inst.resimulate()?;
    }
    Ok(inst)
}

impl ProblemInstance {
    pub fn dims(&self) -> (usize, usize) {
        self.x_true.dims()
    }

    pub fn frame_count(&self) -> usize {
        self.op.frame_count()
    }

    pub fn outlier_count(&self) -> usize {
        self.outlier_mask.iter().filter(|m| **m).count()
    }

    pub fn objective(&self, loss: Loss, lambda: f64) -> Result<Objective> {
        Objective::new(self.op.clone(), self.observed.clone(), self.sigma, loss, lambda)
    }

    /// Frame-averaged observation clipped at zero.
    pub fn initial_guess(&self) -> Image {
        let (h, w) = self.dims();
        let k = self.frame_count() as f64;
        let mut x = Image::zeros(h, w);
        for f in self.observed.frames() {
            x.axpy(1.0 / k, f);
        }
        x.map(|v| v.max(0.0))
    }

    /// Recomputes clean and observed data from the scene, seeds and outlier spec.
    fn resimulate(&mut self) -> Result<()> {
        let mut clean = self.op.apply(&self.x_true)?;
        if let Some(added) = &self.added_signal {
            clean = clean.zip_map(added, |a, b| a + b);
        }
        let mut observed = simulate_from_clean(&clean, self.sigma, self.noise_seed)?;
        let mut mask = vec![false; observed.len()];
        if let Some(c) = self.corruption {
            (observed, mask) = inject_random_corruptions(&observed, c.fraction, c.ceiling, self.outlier_seed)?;
        }
        self.clean = clean;
        self.observed = observed;
        self.outlier_mask = mask;
        Ok(())
    }
}

/// Adds `motion_psf ∗ object` to frame `frame_index` of the clean data and redraws the noise.
pub fn inject_added_object(
    instance: &ProblemInstance,
    object: &Image,
    motion_psf: &Image,
    frame_index: usize,
) -> Result<ProblemInstance> {
    let frames = instance.frame_count();
    if frame_index >= frames {
        return Err(Error::FrameIndex { index: frame_index, frames });
    }
    object.check_dims(instance.dims())?;
    if object.min() < 0.0 {
        return Err(Error::InvalidParameter("added object must be nonnegative".into()));
    }
    let blur = BlurOperator::from_psfs(std::slice::from_ref(motion_psf), instance.psf_center)?;
    let signal = blur.apply(object)?.into_frames().remove(0);
    let mut added = instance
        .added_signal
        .clone()
        .unwrap_or_else(|| StackedVector::filled(frames, instance.dims(), 0.0));
    added.frames_mut()[frame_index].axpy(1.0, &signal);
    let mut out = instance.clone();
    out.added_signal = Some(added);
    out.resimulate()?;
    Ok(out)
}

/// Circularly shifts the true scene by `dx` columns and `dy` rows and redraws the data.
pub fn shift_scene(instance: &ProblemInstance, dx: isize, dy: isize) -> Result<ProblemInstance> {
    let mut out = instance.clone();
    out.x_true = instance.x_true.circshift(dy, dx);
    out.shift = (instance.shift.0 + dx, instance.shift.1 + dy);
    out.resimulate()?;
    Ok(out)
}

/// `‖x − x_true‖ / ‖x_true‖`
pub fn relative_error(x: &Image, x_true: &Image) -> Result<f64> {
    x.check_dims(x_true.dims())?;
    let denom = x_true.norm();
    if denom == 0.0 {
        return Err(Error::InvalidParameter("relative error against a zero image".into()));
    }
    Ok(x.zip_map(x_true, |a, b| a - b).norm() / denom)
}

/// `‖Ax‖ / √(Σ([Ax]_i + σ²))`
pub fn snr(clean: &StackedVector, sigma: f64) -> Result<f64> {
    if let Some(v) = clean.iter().find(|v| *v < -NEGATIVE_SLACK) {
        return Err(Error::InvalidParameter(format!("clean data must be nonnegative, found {v}")));
    }
    let s2 = sigma * sigma;
    let var: f64 = clean.iter().map(|v| v.max(0.0) + s2).sum();
    Ok(clean.norm_sq().sqrt() / var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanPoint {
    pub lambda: f64,
    pub relative_error: f64,
    pub iterations: usize,
    pub termination: Termination,
}

/// Relative error of the reconstruction at each `λ` of an ascending grid,
/// warm-starting each solve from the previous solution.
pub fn lambda_scan(
    instance: &ProblemInstance,
    loss: Loss,
    lambda_grid: &[f64],
    opts: &SolverOptions,
) -> Result<Vec<ScanPoint>> {
    if lambda_grid.is_empty() {
        return Err(Error::InvalidParameter("lambda grid is empty".into()));
    }
    if lambda_grid.windows(2).any(|p| !(p[0] < p[1])) {
        return Err(Error::InvalidParameter("lambda grid must be strictly ascending".into()));
    }
    let mut obj = instance.objective(loss, lambda_grid[0])?;
    let mut x = instance.initial_guess();
    let mut out = Vec::with_capacity(lambda_grid.len());
    for &lambda in lambda_grid {
        obj.set_lambda(lambda)?;
        let (sol, report) = projected_newton(&obj, &x, opts, None)?;
        out.push(ScanPoint {
            lambda,
            relative_error: relative_error(&sol, &instance.x_true)?,
            iterations: report.iterations,
            termination: report.termination,
        });
        x = sol;
    }
    Ok(out)
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0) || !(hi > lo) || n < 2 {
        return Err(Error::InvalidParameter(format!("log grid needs 0 < lo < hi and n >= 2, got {lo}, {hi}, {n}")));
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..n)
        .map(|i| {
            if i + 1 == n {
                hi
            } else {
                (a + (b - a) * i as f64 / (n - 1) as f64).exp()
            }
        })
        .collect())
}

fn manifest_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format { path: path.display().to_string(), reason: reason.into() }
}

fn mask_frames(mask: &[bool], frames: usize, dims: (usize, usize)) -> Vec<Image> {
    let n = dims.0 * dims.1;
    (0..frames)
        .map(|j| {
            let vals = mask[j * n..(j + 1) * n].iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
            Image::new(dims.0, dims.1, vals).expect("finite mask")
        })
        .collect()
}

/// Writes raw arrays, PGM previews and `manifest.txt` into `dir`.
pub fn save_instance(instance: &ProblemInstance, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (h, w) = instance.dims();
    let k = instance.frame_count();
    let mut m = String::new();
    let _ = writeln!(m, "format={INSTANCE_FORMAT}");
    let _ = writeln!(m, "problem={}", instance.problem.name());
    let _ = writeln!(m, "height={h}");
    let _ = writeln!(m, "width={w}");
    let _ = writeln!(m, "frames={k}");
    let _ = writeln!(m, "sigma={}", instance.sigma);
    let _ = writeln!(m, "noise_seed={}", instance.noise_seed);
    let _ = writeln!(m, "outlier_seed={}", instance.outlier_seed);
    let _ = writeln!(m, "psf_center={},{}", instance.psf_center.0, instance.psf_center.1);
    match instance.corruption {
        Some(c) => {
            let _ = writeln!(m, "outlier_fraction={}", c.fraction);
            let _ = writeln!(m, "outlier_ceiling={}", c.ceiling);
        }
        None => {
            let _ = writeln!(m, "outlier_fraction=0");
        }
    }
    let _ = writeln!(m, "outlier_count={}", instance.outlier_count());
    let _ = writeln!(m, "added_object={}", if instance.added_signal.is_some() { "yes" } else { "no" });
    let _ = writeln!(m, "shift={},{}", instance.shift.0, instance.shift.1);
    fs::write(dir.join("manifest.txt"), m)?;

    write_raw(&dir.join("x_true"), &instance.x_true)?;
    write_pgm(&dir.join("x_true.pgm"), &instance.x_true, 255, PgmEncoding::Binary)?;
    let masks = mask_frames(&instance.outlier_mask, k, (h, w));
    for j in 0..k {
        write_raw(&dir.join(format!("psf_{j}")), &instance.psfs[j])?;
        write_raw(&dir.join(format!("clean_{j}")), &instance.clean.frames()[j])?;
        write_raw(&dir.join(format!("observed_{j}")), &instance.observed.frames()[j])?;
        write_raw(&dir.join(format!("mask_{j}")), &masks[j])?;
        write_pgm(&dir.join(format!("observed_{j}.pgm")), &instance.observed.frames()[j], 255, PgmEncoding::Binary)?;
        if let Some(added) = &instance.added_signal {
            write_raw(&dir.join(format!("added_{j}")), &added.frames()[j])?;
        }
    }
    Ok(())
}

fn parse_pair<T: std::str::FromStr>(path: &Path, key: &str, v: &str) -> Result<(T, T)> {
    let bad = || manifest_err(path, format!("{key} must be two comma-separated integers, got {v:?}"));
    let (a, b) = v.split_once(',').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn parse_num<T: std::str::FromStr>(path: &Path, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| manifest_err(path, format!("{key} has invalid value {v:?}")))
}

/// Reads an instance written by [`save_instance`].
pub fn load_instance(dir: &Path) -> Result<ProblemInstance> {
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path)?;
    let mut problem = None;
    let mut frames: Option<usize> = None;
    let mut sigma: Option<f64> = None;
    let mut noise_seed: Option<u64> = None;
    let mut outlier_seed: Option<u64> = None;
    let mut center: Option<(usize, usize)> = None;
    let mut fraction = 0.0;
    let mut ceiling: Option<f64> = None;
    let mut shift = (0, 0);
    let mut added = false;
    let mut count: Option<usize> = None;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (key, v) = line
            .split_once('=')
            .ok_or_else(|| manifest_err(&path, format!("expected key=value, got {line:?}")))?;
        let (key, v) = (key.trim(), v.trim());
        match key {
            "format" if v == INSTANCE_FORMAT => {}
            "format" => return Err(manifest_err(&path, format!("unsupported format {v:?}"))),
            "problem" => problem = Some(TestProblem::parse(v)?),
            "height" | "width" => {
                parse_num::<usize>(&path, key, v)?;
            }
            "frames" => frames = Some(parse_num(&path, key, v)?),
            "sigma" => sigma = Some(parse_num(&path, key, v)?),
            "noise_seed" => noise_seed = Some(parse_num(&path, key, v)?),
            "outlier_seed" => outlier_seed = Some(parse_num(&path, key, v)?),
            "psf_center" => center = Some(parse_pair(&path, key, v)?),
            "outlier_fraction" => fraction = parse_num(&path, key, v)?,
            "outlier_ceiling" => ceiling = Some(parse_num(&path, key, v)?),
            "outlier_count" => count = Some(parse_num(&path, key, v)?),
            "added_object" => added = v == "yes",
            "shift" => shift = parse_pair(&path, key, v)?,
            other => return Err(manifest_err(&path, format!("unknown key {other:?}"))),
        }
    }
    let missing = |k: &str| manifest_err(&path, format!("missing key {k}"));
    let frames = frames.ok_or_else(|| missing("frames"))?;
    let center = center.ok_or_else(|| missing("psf_center"))?;
    let read_frames = |stem: &str| -> Result<Vec<Image>> {
        (0..frames).map(|j| read_raw(&dir.join(format!("{stem}_{j}")))).collect()
    };
    let x_true = read_raw(&dir.join("x_true"))?;
    let psfs = read_frames("psf")?;
    let op = BlurOperator::from_psfs(&psfs, center)?;
    let clean = StackedVector::new(read_frames("clean")?)?;
    let observed = StackedVector::new(read_frames("observed")?)?;
    let outlier_mask: Vec<bool> = read_frames("mask")?
        .iter()
        .flat_map(|m| m.as_slice().iter().map(|&v| v != 0.0).collect::<Vec<_>>())
        .collect();
    for v in [&clean, &observed] {
        v.check_shape(frames, x_true.dims())?;
    }
    let added_signal = if added { Some(StackedVector::new(read_frames("added")?)?) } else { None };
    let corruption = if fraction > 0.0 {
        Some(Corruption { fraction, ceiling: ceiling.ok_or_else(|| missing("outlier_ceiling"))? })
    } else {
        None
    };
    let inst = ProblemInstance {
        problem: problem.ok_or_else(|| missing("problem"))?,
        x_true,
        psfs,
        psf_center: center,
        op,
        clean,
        added_signal,
        observed,
        outlier_mask,
        sigma: sigma.ok_or_else(|| missing("sigma"))?,
        noise_seed: noise_seed.ok_or_else(|| missing("noise_seed"))?,
        outlier_seed: outlier_seed.ok_or_else(|| missing("outlier_seed"))?,
        corruption,
        shift,
    };
    if let Some(c) = count {
        if c != inst.outlier_count() {
            return Err(manifest_err(&path, format!("outlier_count {c} disagrees with mask ({})", inst.outlier_count())));
        }
    }
    Ok(inst)
}
