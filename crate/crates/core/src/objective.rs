//! Robust weighted least-squares fidelity with Tikhonov regularization:
//!
//! `J_λ(x) = Σ_i ρ(t_i) + (λ/2)‖Lx‖²`, `t_i = ([Ax]_i − b_i) / √([Ax]_i + σ²)`.

use crate::counters;
use crate::error::{Error, Result};
use crate::grid::{dft2, idft2_real, Image, Spectrum};
use crate::operators::{BlurOperator, LaplacianSymbol, StackedVector};

/// Talwar threshold with 95% asymptotic efficiency under unit-normal residuals.
pub const TALWAR_BETA_95: f64 = 2.795;
/// 95% efficiency thresholds of the comparison losses.
pub const HUBER_BETA_95: f64 = 1.345;
pub const FAIR_BETA_95: f64 = 1.400;
pub const LOGISTIC_BETA_95: f64 = 1.205;

/// Lower clamp on the model variance `[Ax]_i + σ²`.
pub const VARIANCE_FLOOR: f64 = 1e-8;
/// Model variances below `-VARIANCE_SLACK` cannot come from round-off and are rejected.
pub const VARIANCE_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Talwar,
    Huber,
    Fair,
    Logistic,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Talwar => "talwar",
            LossKind::Huber => "huber",
            LossKind::Fair => "fair",
            LossKind::Logistic => "logistic",
        }
    }

    pub fn default_beta(self) -> f64 {
        match self {
            LossKind::Talwar => TALWAR_BETA_95,
            LossKind::Huber => HUBER_BETA_95,
            LossKind::Fair => FAIR_BETA_95,
            LossKind::Logistic => LOGISTIC_BETA_95,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub rho: f64,
    pub drho: f64,
    pub ddrho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Loss {
    kind: LossKind,
    beta: f64,
}

impl Loss {
    /// `beta` may be `+∞` for Talwar and Huber (plain quadratic loss).
    pub fn new(kind: LossKind, beta: f64) -> Result<Self> {
        let infinite_ok = matches!(kind, LossKind::Talwar | LossKind::Huber);
        if beta.is_nan() || beta <= 0.0 || (beta.is_infinite() && !infinite_ok) {
            return Err(Error::InvalidParameter(format!(
                "beta for {} must be positive{}, got {beta}",
                kind.name(),
                if infinite_ok { "" } else { " and finite" }
            )));
        }
        Ok(Self { kind, beta })
    }

    pub fn talwar() -> Self {
        Self {
            kind: LossKind::Talwar,
            beta: TALWAR_BETA_95,
        }
    }

    /// Talwar with `β = ∞`: the non-robust weighted least-squares baseline.
    pub fn standard() -> Self {
        Self {
            kind: LossKind::Talwar,
            beta: f64::INFINITY,
        }
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Whether a scaled residual lies on the quadratic branch (closed at `|t| = β`).
    pub fn is_inlier(&self, t: f64) -> bool {
        t.abs() <= self.beta
    }

    pub fn eval(&self, t: f64) -> LossValue {
        let b = self.beta;
        let a = t.abs();
        match self.kind {
            LossKind::Talwar => {
                if a <= b {
                    LossValue { rho: 0.5 * t * t, drho: t, ddrho: 1.0 }
                } else {
                    LossValue { rho: 0.5 * b * b, drho: 0.0, ddrho: 0.0 }
                }
            }
            LossKind::Huber => {
                if a <= b {
                    LossValue { rho: 0.5 * t * t, drho: t, ddrho: 1.0 }
                } else {
                    LossValue { rho: b * a - 0.5 * b * b, drho: b * t.signum(), ddrho: 0.0 }
                }
            }
            LossKind::Fair => {
                let q = a / b;
                LossValue {
                    rho: b * b * (q - q.ln_1p()),
                    drho: t / (1.0 + q),
                    ddrho: 1.0 / ((1.0 + q) * (1.0 + q)),
                }
            }
            LossKind::Logistic => {
                let u = t / b;
                let th = u.tanh();
                // ln cosh(u) = |u| + ln(1 + e^{-2|u|}) − ln 2, stable for large |u|
                let au = u.abs();
                let lncosh = au + (-2.0 * au).exp().ln_1p() - std::f64::consts::LN_2;
                LossValue { rho: b * b * lncosh, drho: b * th, ddrho: 1.0 - th * th }
            }
        }
    }
}

/// Scalar gradient/Hessian weights `(z_i, D_ii)` by the generic chain rule with
/// `w = ([Ax]_i + σ²)^{-1/2}` and `r = [Ax]_i − b_i`.
pub fn chain_rule_weights(loss: &Loss, ax: f64, b: f64, sigma: f64) -> (f64, f64) {
    let u = (ax + sigma * sigma).max(VARIANCE_FLOOR);
    let r = ax - b;
    let w = u.powf(-0.5);
    let dw = -0.5 * u.powf(-1.5);
    let ddw = 0.75 * u.powf(-2.5);
    let lv = loss.eval(w * r);
    let lead = dw * r + w;
    let z = lead * lv.drho;
    let d = (ddw * r + 2.0 * dw) * lv.drho + lead * lead * lv.ddrho;
    (z, d)
}

/// Talwar weights in simplified closed form; zero on saturated entries.
pub fn talwar_weights(beta: f64, ax: f64, b: f64, sigma: f64) -> (f64, f64) {
    let s2 = sigma * sigma;
    let u = (ax + s2).max(VARIANCE_FLOOR);
    let c = b + s2;
    let t = (ax - b) / u.sqrt();
    if t.abs() <= beta {
        let ratio = c / u;
        (0.5 * (1.0 - ratio * ratio), c * c / (u * u * u))
    } else {
        (0.0, 0.0)
    }
}

#[derive(Debug, Clone)]
pub struct WeightReport {
    pub z: StackedVector,
    pub d: StackedVector,
    /// One flag per stacked residual entry, frame-major.
    pub inlier_mask: Vec<bool>,
}

impl WeightReport {
    pub fn outlier_count(&self) -> usize {
        self.inlier_mask.iter().filter(|m| !**m).count()
    }
}

/// Forward-model quantities shared by value, gradient and weights at one iterate.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub xhat: Spectrum,
    pub ax: StackedVector,
}

#[derive(Debug, Clone)]
pub struct Objective {
    op: BlurOperator,
    lap: LaplacianSymbol,
    data: StackedVector,
    sigma: f64,
    loss: Loss,
    lambda: f64,
}

impl Objective {
    pub fn new(
        op: BlurOperator,
        data: StackedVector,
        sigma: f64,
        loss: Loss,
        lambda: f64,
    ) -> Result<Self> {
        data.check_shape(op.frame_count(), op.dims())?;
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidParameter(format!("sigma must be finite and >= 0, got {sigma}")));
        }
        check_lambda(lambda)?;
        let lap = LaplacianSymbol::new(op.dims())?;
        Ok(Self { op, lap, data, sigma, loss, lambda })
    }

    pub fn op(&self) -> &BlurOperator {
        &self.op
    }

    pub fn laplacian(&self) -> &LaplacianSymbol {
        &self.lap
    }

    pub fn data(&self) -> &StackedVector {
        &self.data
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn loss(&self) -> &Loss {
        &self.loss
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn dims(&self) -> (usize, usize) {
        self.op.dims()
    }

    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        check_lambda(lambda)?;
        self.lambda = lambda;
        Ok(())
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        let mut o = self.clone();
        o.set_lambda(lambda)?;
        Ok(o)
    }

    pub fn state(&self, x: &Image) -> Result<ModelState> {
        x.check_dims(self.dims())?;
        let xhat = dft2(x);
        let ax = self.op.apply_spectrum(&xhat)?;
        Ok(ModelState { xhat, ax })
    }

    /// Clamped model variances `[Ax]_i + σ²`.
    fn variances(&self, ax: &StackedVector) -> Result<StackedVector> {
        let s2 = self.sigma * self.sigma;
        for (i, a) in ax.iter().enumerate() {
            let u = a + s2;
            if !u.is_finite() || u < -VARIANCE_SLACK {
                return Err(Error::InvalidDenominator { index: i, value: u });
            }
        }
        Ok(ax.map(|a| (a + s2).max(VARIANCE_FLOOR)))
    }

    fn residual_from(&self, ax: &StackedVector) -> Result<StackedVector> {
        let u = self.variances(ax)?;
        let r = ax.zip_map(&self.data, |a, b| a - b);
        Ok(r.zip_map(&u, |r, u| r / u.sqrt()))
    }

    pub fn scaled_residual(&self, x: &Image) -> Result<StackedVector> {
        let st = self.state(x)?;
        self.residual_from(&st.ax)
    }

    pub fn value_at(&self, st: &ModelState) -> Result<f64> {
        let t = self.residual_from(&st.ax)?;
        let fidelity: f64 = t.iter().map(|ti| self.loss.eval(ti).rho).sum();
        Ok(fidelity + 0.5 * self.lambda * self.lap.norm_sq_from_spectrum(&st.xhat))
    }

    /// `J_λ(x)`; rejects iterates with negative entries.
    pub fn value(&self, x: &Image) -> Result<f64> {
        check_feasible(x)?;
        self.value_at(&self.state(x)?)
    }

    pub fn weights_at(&self, st: &ModelState) -> Result<WeightReport> {
        let t = self.residual_from(&st.ax)?;
        let sigma = self.sigma;
        let mut z = st.ax.clone();
        let mut d = st.ax.clone();
        let mut mask = Vec::with_capacity(st.ax.len());
        for (fi, ((zf, df), (af, bf))) in z
            .frames_mut()
            .iter_mut()
            .zip(d.frames_mut().iter_mut())
            .zip(st.ax.frames().iter().zip(self.data.frames()))
            .enumerate()
        {
            let tf = &t.frames()[fi];
            for (i, ((zi, di), (&a, &b))) in zf
                .as_mut_slice()
                .iter_mut()
                .zip(df.as_mut_slice().iter_mut())
                .zip(af.as_slice().iter().zip(bf.as_slice()))
                .enumerate()
            {
                let inlier = self.loss.is_inlier(tf.as_slice()[i]);
                mask.push(inlier);
                let (zv, dv) = match self.loss.kind() {
                    LossKind::Talwar if inlier => talwar_weights(f64::INFINITY, a, b, sigma),
                    LossKind::Talwar => (0.0, 0.0),
                    _ => chain_rule_weights(&self.loss, a, b, sigma),
                };
                *zi = zv;
                *di = dv;
            }
        }
        Ok(WeightReport { z, d, inlier_mask: mask })
    }

    pub fn hessian_weights(&self, x: &Image) -> Result<WeightReport> {
        self.weights_at(&self.state(x)?)
    }

    /// `Aᵀz + λLᵀLx` assembled in the frequency domain from `x̂`.
    pub fn gradient_at(&self, st: &ModelState, weights: &WeightReport) -> Result<Image> {
        let mut acc: Spectrum = st.xhat.clone();
        for (a, s) in acc.as_mut_slice().iter_mut().zip(self.lap.sq_symbol()) {
            *a *= self.lambda * s;
        }
        counters::mults(1);
        for (h, zj) in self.op.otfs().iter().zip(weights.z.frames()) {
            let zhat = dft2(zj);
            counters::mults(1);
            counters::adds(1);
            for ((a, hv), zv) in acc.as_mut_slice().iter_mut().zip(h.as_slice()).zip(zhat.as_slice()) {
                *a += hv.conj() * zv;
            }
        }
        Ok(idft2_real(&acc))
    }

    pub fn gradient(&self, x: &Image) -> Result<Image> {
        let st = self.state(x)?;
        let w = self.weights_at(&st)?;
        self.gradient_at(&st, &w)
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "lambda must be finite and >= 0, got {lambda}"
        )));
    }
    Ok(())
}

pub(crate) fn check_feasible(x: &Image) -> Result<()> {
    if let Some((index, &value)) = x.as_slice().iter().enumerate().find(|(_, v)| **v < 0.0) {
        return Err(Error::Infeasible { index, value });
    }
    Ok(())
}

/// Sign summary of data-term Hessian entries for one loss over a sample set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvexityReport {
    pub loss: LossKind,
    pub samples: usize,
    pub min_d: f64,
    /// `(ax, b, sigma)` at which `min_d` occurs.
    pub argmin: (f64, f64, f64),
    pub negative: usize,
}

impl ConvexityReport {
    pub fn min_sign(&self) -> i8 {
        if self.min_d < 0.0 {
            -1
        } else if self.min_d > 0.0 {
            1
        } else {
            0
        }
    }
}

/// Evaluates the chain-rule `D_ii` of `loss` at each `(ax, b, sigma)` sample.
pub fn convexity_diagnostic(loss: &Loss, samples: &[(f64, f64, f64)]) -> Result<ConvexityReport> {
    let mut report = ConvexityReport {
        loss: loss.kind(),
        samples: samples.len(),
        min_d: f64::INFINITY,
        argmin: (f64::NAN, f64::NAN, f64::NAN),
        negative: 0,
    };
    for &(ax, b, sigma) in samples {
        if !(ax + sigma * sigma > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sample needs ax + sigma^2 > 0, got ax={ax}, sigma={sigma}"
            )));
        }
        let (_, d) = chain_rule_weights(loss, ax, b, sigma);
        if d < 0.0 {
            report.negative += 1;
        }
        if d < report.min_d {
            report.min_d = d;
            report.argmin = (ax, b, sigma);
        }
    }
    Ok(report)
}
