//! Plain-text `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! validated; errors name the offending key.

use std::path::PathBuf;

use pgdeblur::objective::{Loss, LossKind};
use pgdeblur::testbed::{InstanceSpec, TestProblem};
use pgdeblur::SolverOptions;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossChoice {
    Talwar,
    Standard,
}

impl LossChoice {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "talwar" => Some(LossChoice::Talwar),
            "standard" => Some(LossChoice::Standard),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossChoice::Talwar => "talwar",
            LossChoice::Standard => "standard",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Existing instance directory; when absent the instance is generated.
    pub instance: Option<PathBuf>,
    pub out: PathBuf,

    pub problem: TestProblem,
    pub size: usize,
    pub frames: usize,
    pub max_intensity: f64,
    pub sigma: f64,
    pub noise_seed: u64,
    pub outlier_seed: u64,
    pub outlier_fraction: f64,
    pub outlier_ceiling: Option<f64>,
    pub added_object: bool,
    pub shift_x: isize,
    pub shift_y: isize,

    pub loss: LossChoice,
    pub beta: Option<f64>,
    pub lambda: f64,
    pub solver: SolverOptions,

    pub gcv_lo: f64,
    pub gcv_hi: f64,
    pub gcv_x_tol: f64,
    pub gcv_cg_tol: f64,
    pub gcv_cg_maxit: usize,
    pub gcv_probe_seed: u64,
    pub gcv_warm_start: bool,
    pub gcv_solve: bool,

    pub scan_lo: f64,
    pub scan_hi: f64,
    pub scan_points: usize,
    pub scan_fractions: Vec<f64>,
    pub scan_losses: Vec<LossChoice>,

    pub bench_pcg_tols: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = InstanceSpec::default();
        Self {
            instance: None,
            out: PathBuf::from("out"),
            problem: spec.problem,
            size: spec.size,
            frames: spec.frames,
            max_intensity: spec.max_intensity,
            sigma: spec.sigma,
            noise_seed: spec.noise_seed,
            outlier_seed: spec.outlier_seed,
            outlier_fraction: spec.outlier_fraction,
            outlier_ceiling: spec.outlier_ceiling,
            added_object: spec.added_object,
            shift_x: spec.shift.0,
            shift_y: spec.shift.1,
            loss: LossChoice::Talwar,
            beta: None,
            lambda: 3e-5,
            solver: SolverOptions::default(),
            gcv_lo: 0.0,
            gcv_hi: 1e-1,
            gcv_x_tol: 1e-8,
            gcv_cg_tol: 1e-4,
            gcv_cg_maxit: 150,
            gcv_probe_seed: 0,
            gcv_warm_start: false,
            gcv_solve: true,
            scan_lo: 1e-9,
            scan_hi: 1e-2,
            scan_points: 12,
            scan_fractions: vec![0.0],
            scan_losses: vec![LossChoice::Talwar, LossChoice::Standard],
            bench_pcg_tols: vec![1e-1],
        }
    }
}

fn invalid(key: &str, value: &str, expected: &str) -> CliError {
    CliError::Config { key: key.to_string(), reason: format!("expected {expected}, got {value:?}") }
}

fn num<T: std::str::FromStr>(key: &str, value: &str, expected: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| invalid(key, value, expected))
}

fn real(key: &str, value: &str) -> Result<f64, CliError> {
    let v: f64 = num(key, value, "a real number")?;
    if v.is_nan() {
        return Err(invalid(key, value, "a real number"));
    }
    Ok(v)
}

fn boolean(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(invalid(key, value, "true or false")),
    }
}

fn list<T>(key: &str, value: &str, item: impl Fn(&str) -> Result<T, CliError>) -> Result<Vec<T>, CliError> {
    let out: Vec<T> = value.split(',').map(|s| item(s.trim())).collect::<Result<_, _>>()?;
    if out.is_empty() {
        return Err(invalid(key, value, "a nonempty comma-separated list"));
    }
    Ok(out)
}

fn loss_choice(key: &str, value: &str) -> Result<LossChoice, CliError> {
    LossChoice::parse(value).ok_or_else(|| invalid(key, value, "talwar or standard"))
}

impl RunConfig {
    /// Parses configuration text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| CliError::Config {
                key: format!("line {}", lineno + 1),
                reason: format!("expected key = value, got {line:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(CliError::Config { key: key.to_string(), reason: "given more than once".into() });
            }
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "instance" => self.instance = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "problem" => {
                self.problem = TestProblem::parse(value).map_err(|_| invalid(key, value, "satellite or carbon-ash"))?
            }
            "size" => self.size = num(key, value, "a positive integer")?,
            "frames" => self.frames = num(key, value, "an integer 1..3")?,
            "max_intensity" => self.max_intensity = real(key, value)?,
            "sigma" => self.sigma = real(key, value)?,
            "seed" => {
                let s: u64 = num(key, value, "a nonnegative integer")?;
                self.noise_seed = s;
                self.outlier_seed = s.wrapping_add(1);
                self.gcv_probe_seed = s.wrapping_add(2);
            }
            "noise_seed" => self.noise_seed = num(key, value, "a nonnegative integer")?,
            "outlier_seed" => self.outlier_seed = num(key, value, "a nonnegative integer")?,
            "outlier_fraction" => self.outlier_fraction = real(key, value)?,
            "outlier_ceiling" => self.outlier_ceiling = Some(real(key, value)?),
            "added_object" => self.added_object = boolean(key, value)?,
            "shift_x" => self.shift_x = num(key, value, "an integer")?,
            "shift_y" => self.shift_y = num(key, value, "an integer")?,
            "loss" => self.loss = loss_choice(key, value)?,
            "beta" => self.beta = Some(real(key, value)?),
            "lambda" => self.lambda = real(key, value)?,
            "newton_tol" => self.solver.newton_tol = real(key, value)?,
            "newton_maxit" => self.solver.newton_maxit = num(key, value, "a positive integer")?,
            "pcg_tol" => self.solver.pcg_tol = real(key, value)?,
            "pcg_maxit" => self.solver.pcg_maxit = num(key, value, "a positive integer")?,
            "linesearch_max_halvings" => self.solver.linesearch_max_halvings = num(key, value, "an integer")?,
            "preconditioner" => self.solver.use_preconditioner = boolean(key, value)?,
            "gcv_lo" => self.gcv_lo = real(key, value)?,
            "gcv_hi" => self.gcv_hi = real(key, value)?,
            "gcv_x_tol" => self.gcv_x_tol = real(key, value)?,
            "gcv_cg_tol" => self.gcv_cg_tol = real(key, value)?,
            "gcv_cg_maxit" => self.gcv_cg_maxit = num(key, value, "a positive integer")?,
            "gcv_probe_seed" => self.gcv_probe_seed = num(key, value, "a nonnegative integer")?,
            "gcv_warm_start" => self.gcv_warm_start = boolean(key, value)?,
            "gcv_solve" => self.gcv_solve = boolean(key, value)?,
            "scan_lo" => self.scan_lo = real(key, value)?,
            "scan_hi" => self.scan_hi = real(key, value)?,
            "scan_points" => self.scan_points = num(key, value, "an integer >= 1")?,
            "scan_fractions" => self.scan_fractions = list(key, value, |s| real(key, s))?,
            "scan_losses" => self.scan_losses = list(key, value, |s| loss_choice(key, s))?,
            "bench_pcg_tols" => self.bench_pcg_tols = list(key, value, |s| real(key, s))?,
            other => {
                return Err(CliError::Config { key: other.to_string(), reason: "unknown key".into() });
            }
        }
        Ok(())
    }

    /// Range checks that need the whole configuration.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |key: &str, reason: String| Err(CliError::Config { key: key.into(), reason });
        if self.size < 8 {
            return bad("size", format!("must be at least 8, got {}", self.size));
        }
        if !(1..=3).contains(&self.frames) {
            return bad("frames", format!("must be 1, 2 or 3, got {}", self.frames));
        }
        if !(self.max_intensity > 0.0) || !self.max_intensity.is_finite() {
            return bad("max_intensity", format!("must be positive, got {}", self.max_intensity));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return bad("sigma", format!("must be finite and >= 0, got {}", self.sigma));
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return bad("outlier_fraction", format!("must lie in [0, 1], got {}", self.outlier_fraction));
        }
        if let Some(c) = self.outlier_ceiling {
            if !(c >= 0.0) || !c.is_finite() {
                return bad("outlier_ceiling", format!("must be finite and >= 0, got {c}"));
            }
        }
        if let Some(b) = self.beta {
            if self.loss == LossChoice::Standard {
                return bad("beta", "has no effect with loss = standard".into());
            }
            if !(b > 0.0) {
                return bad("beta", format!("must be positive, got {b}"));
            }
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda", format!("must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.solver.newton_tol >= 0.0) {
            return bad("newton_tol", format!("must be >= 0, got {}", self.solver.newton_tol));
        }
        if self.solver.newton_maxit == 0 {
            return bad("newton_maxit", "must be at least 1".into());
        }
        if !(self.solver.pcg_tol >= 0.0) {
            return bad("pcg_tol", format!("must be >= 0, got {}", self.solver.pcg_tol));
        }
        if self.solver.pcg_maxit == 0 {
            return bad("pcg_maxit", "must be at least 1".into());
        }
        if !(self.gcv_lo >= 0.0) {
            return bad("gcv_lo", format!("must be >= 0, got {}", self.gcv_lo));
        }
        if !(self.gcv_hi >= self.gcv_lo) || !self.gcv_hi.is_finite() {
            return bad("gcv_hi", format!("must be finite and >= gcv_lo, got {}", self.gcv_hi));
        }
        if !(self.gcv_x_tol > 0.0) {
            return bad("gcv_x_tol", format!("must be positive, got {}", self.gcv_x_tol));
        }
        if !(self.gcv_cg_tol > 0.0) {
            return bad("gcv_cg_tol", format!("must be positive, got {}", self.gcv_cg_tol));
        }
        if self.gcv_cg_maxit == 0 {
            return bad("gcv_cg_maxit", "must be at least 1".into());
        }
        if !(self.scan_lo > 0.0) {
            return bad("scan_lo", format!("must be positive, got {}", self.scan_lo));
        }
        if self.scan_points == 0 {
            return bad("scan_points", "must be at least 1".into());
        }
        if self.scan_points > 1 && !(self.scan_hi > self.scan_lo) {
            return bad("scan_hi", format!("must exceed scan_lo, got {}", self.scan_hi));
        }
        if let Some(f) = self.scan_fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return bad("scan_fractions", format!("entries must lie in [0, 1], got {f}"));
        }
        if let Some(t) = self.bench_pcg_tols.iter().find(|t| !(**t > 0.0)) {
            return bad("bench_pcg_tols", format!("entries must be positive, got {t}"));
        }
        Ok(())
    }

    pub fn instance_spec(&self) -> InstanceSpec {
        InstanceSpec {
            problem: self.problem,
            size: self.size,
            frames: self.frames,
            max_intensity: self.max_intensity,
            sigma: self.sigma,
            noise_seed: self.noise_seed,
            outlier_seed: self.outlier_seed,
            outlier_fraction: self.outlier_fraction,
            outlier_ceiling: self.outlier_ceiling,
            added_object: self.added_object,
            shift: (self.shift_x, self.shift_y),
        }
    }

    pub fn loss_for(&self, choice: LossChoice) -> Result<Loss, CliError> {
        Ok(match choice {
            LossChoice::Standard => Loss::standard(),
            LossChoice::Talwar => match self.beta {
                Some(b) => Loss::new(LossKind::Talwar, b)?,
                None => Loss::talwar(),
            },
        })
    }

    /// The λ grid of a scan: a single point or `scan_points` log-spaced values.
    pub fn scan_grid(&self) -> Result<Vec<f64>, CliError> {
        if self.scan_points == 1 {
            return Ok(vec![self.scan_lo]);
        }
        Ok(pgdeblur::testbed::log_grid(self.scan_lo, self.scan_hi, self.scan_points)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = RunConfig::parse("").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.sigma, 5.0);
        assert_eq!(cfg.loss, LossChoice::Talwar);
    }

    #[test]
    fn parses_keys_and_comments() {
        let cfg = RunConfig::parse(
            "# demo\nsize = 32\n\nloss = standard\nscan_fractions = 0, 0.05,0.1\npreconditioner = false\n",
        )
        .unwrap();
        assert_eq!(cfg.size, 32);
        assert_eq!(cfg.loss, LossChoice::Standard);
        assert_eq!(cfg.scan_fractions, vec![0.0, 0.05, 0.1]);
        assert!(!cfg.solver.use_preconditioner);
    }

    #[test]
    fn errors_name_the_key() {
        for (text, key) in [
            ("colour = red", "colour"),
            ("size = big", "size"),
            ("loss = huber", "loss"),
            ("added_object = maybe", "added_object"),
            ("size = 8\nsize = 9", "size"),
        ] {
            let err = RunConfig::parse(text).unwrap_err().to_string();
            assert!(err.contains(key), "{text}: {err}");
        }
        let cfg = RunConfig::parse("outlier_fraction = 2").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("outlier_fraction"));
        let cfg = RunConfig::parse("loss = standard\nbeta = 2").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("beta"));
        let cfg = RunConfig::parse("gcv_lo = 1\ngcv_hi = 0.5").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("gcv_hi"));
    }

    #[test]
    fn seed_fans_out() {
        let cfg = RunConfig::parse("seed = 10").unwrap();
        assert_eq!((cfg.noise_seed, cfg.outlier_seed, cfg.gcv_probe_seed), (10, 11, 12));
    }

    #[test]
    fn scan_grid_single_point() {
        let cfg = RunConfig::parse("scan_points = 1\nscan_lo = 0.01").unwrap();
        assert_eq!(cfg.scan_grid().unwrap(), vec![0.01]);
    }
}
