//! Column-scaling preconditioner `M = D̂(AᵀA + λ̂LᵀL)D̂`.
//!
//! `D̂` is chosen so that `diag(D̂AᵀAD̂) = diag(AᵀDA)`. Under periodic
//! boundaries the entries of `A` are PSF values, so `(Aᵀ).²` is the adjoint
//! of the operator built from the squared PSF and the diagonal of `AᵀA` is
//! the constant `Σ_j sum(psf_j²)`.

use crate::counters;
use crate::error::{Error, Result};
use crate::grid::{dft2, idft2_real, Image, Spectrum};
use crate::operators::{adjoint_with_symbols, BlurOperator, LaplacianSymbol, StackedVector};

/// `D̂` entries below this fraction of `max(D̂)` are raised to it.
pub const DHAT_FLOOR: f64 = 1e-6;
/// Relative floor on the eigenvalues of `AᵀA + λ̂LᵀL`.
const SYMBOL_FLOOR: f64 = 1e-12;

/// `D̂_ii = sqrt( ((Aᵀ).² diag(D))_i / ((Aᵀ).² 1)_i )`, floored at `DHAT_FLOOR·max`.
pub fn build_dhat(op: &BlurOperator, psf_sq_otfs: &[Spectrum], weights: &StackedVector) -> Result<Image> {
    weights.check_shape(op.frame_count(), op.dims())?;
    for (i, w) in weights.iter().enumerate() {
        if !(w >= 0.0) || !w.is_finite() {
            return Err(Error::InvalidWeight { index: i, value: w });
        }
    }
    let numerator = adjoint_with_symbols(psf_sq_otfs, weights)?;
    let denominator: f64 = psf_sq_otfs.iter().map(|s| s.get(0, 0).re).sum();
    if !(denominator > 0.0) {
        return Err(Error::InvalidParameter("blur operator has an all-zero PSF".into()));
    }
    counters::mults(1);
    let mut dhat = numerator.map(|v| (v.max(0.0) / denominator).sqrt());
    let top = dhat.max();
    if !(top > 0.0) {
        return Err(Error::AllWeightsZero);
    }
    let floor = DHAT_FLOOR * top;
    for v in dhat.as_mut_slice() {
        *v = v.max(floor);
    }
    Ok(dhat)
}

#[derive(Debug, Clone)]
pub struct Preconditioner {
    dhat: Image,
    inv_dhat: Image,
    inv_symbol: Vec<f64>,
    lambda_hat: f64,
}

impl Preconditioner {
    /// Assembles `M` for Hessian weights `weights` and regularization `lambda`.
    pub fn build(
        op: &BlurOperator,
        lap: &LaplacianSymbol,
        weights: &StackedVector,
        lambda: f64,
    ) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidParameter(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        let dhat = build_dhat(op, op.squared_psf_otfs(), weights)?;
        Self::from_dhat(op, lap, dhat, lambda)
    }

    /// Assembles `M` around a given scaling; `λ̂ = λ / mean(D̂)²`.
    pub fn from_dhat(op: &BlurOperator, lap: &LaplacianSymbol, dhat: Image, lambda: f64) -> Result<Self> {
        dhat.check_dims(op.dims())?;
        if let Some((i, &v)) = dhat.as_slice().iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(Error::InvalidWeight { index: i, value: v });
        }
        let mean = dhat.mean();
        let lambda_hat = lambda / (mean * mean);
        let mut symbol: Vec<f64> = lap.sq_symbol().iter().map(|s| lambda_hat * s).collect();
        for h in op.otfs() {
            for (acc, v) in symbol.iter_mut().zip(h.as_slice()) {
                *acc += v.norm_sqr();
            }
        }
        let top = symbol.iter().copied().fold(0.0, f64::max);
        if !(top > 0.0) {
            return Err(Error::InvalidParameter("preconditioner symbol vanishes".into()));
        }
        let inv_symbol = symbol.iter().map(|s| 1.0 / s.max(SYMBOL_FLOOR * top)).collect();
        let inv_dhat = dhat.map(|v| 1.0 / v);
        Ok(Self {
            dhat,
            inv_dhat,
            inv_symbol,
            lambda_hat,
        })
    }

    pub fn dhat(&self) -> &Image {
        &self.dhat
    }

    pub fn lambda_hat(&self) -> f64 {
        self.lambda_hat
    }

    pub fn inv_symbol(&self) -> &[f64] {
        &self.inv_symbol
    }

    /// `M⁻¹r = D̂⁻¹ idft2( inv_symbol ⊙ dft2(D̂⁻¹ r) )`: one transform pair, three products.
    pub fn solve(&self, r: &Image) -> Result<Image> {
        r.check_dims(self.dhat.dims())?;
        counters::mults(1);
        let scaled = r.zip_map(&self.inv_dhat, |a, b| a * b);
        let mut spec = dft2(&scaled);
        counters::mults(1);
        for (v, s) in spec.as_mut_slice().iter_mut().zip(&self.inv_symbol) {
            *v *= *s;
        }
        let back = idft2_real(&spec);
        counters::mults(1);
        Ok(back.zip_map(&self.inv_dhat, |a, b| a * b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counters::OpCounts;
    use crate::operators::hessian_apply;
    use crate::testutil::{circulant_from_psf, dense_mul, dense_mul_t, random_image, stencil_matrix};

    fn psf(n: usize, seed: u64) -> Image {
        let p = random_image(n, n, seed).map(|v| v.abs() + 0.02);
        p.scaled(1.0 / p.sum())
    }

    fn positive(n: usize, seed: u64) -> Image {
        random_image(n, n, seed).map(|v| v.abs() + 0.01)
    }

    #[test]
    fn unit_weights_give_unit_scaling() {
        let op = BlurOperator::from_psfs(&[psf(8, 1), psf(8, 2)], (4, 4)).unwrap();
        let d = StackedVector::filled(2, (8, 8), 1.0);
        let dhat = build_dhat(&op, op.squared_psf_otfs(), &d).unwrap();
        assert!(dhat.as_slice().iter().all(|v| (v - 1.0).abs() < 1e-12));
        let lap = LaplacianSymbol::new((8, 8)).unwrap();
        let m = Preconditioner::build(&op, &lap, &d, 0.3).unwrap();
        assert!((m.lambda_hat() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn constant_weights_scale_homogeneously() {
        let op = BlurOperator::from_psfs(&[psf(6, 3)], (2, 2)).unwrap();
        let lap = LaplacianSymbol::new((6, 6)).unwrap();
        let d = StackedVector::filled(1, (6, 6), 9.0);
        let m = Preconditioner::build(&op, &lap, &d, 0.45).unwrap();
        assert!(m.dhat().as_slice().iter().all(|v| (v - 3.0).abs() < 1e-12));
        assert!((m.lambda_hat() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn dhat_matches_dense_diagonal_ratio() {
        let n = 6;
        let p = psf(n, 5);
        let op = BlurOperator::from_psfs(&[p.clone()], (1, 4)).unwrap();
        let w = positive(n, 6);
        let d = StackedVector::new(vec![w.clone()]).unwrap();
        let dhat = build_dhat(&op, op.squared_psf_otfs(), &d).unwrap();
        let a = circulant_from_psf(&p, (1, 4));
        for i in 0..n * n {
            let atda: f64 = (0..n * n).map(|k| a[k][i] * a[k][i] * w.as_slice()[k]).sum();
            let ata: f64 = (0..n * n).map(|k| a[k][i] * a[k][i]).sum();
            assert!((dhat.as_slice()[i] - (atda / ata).sqrt()).abs() < 1e-8);
        }
    }

    #[test]
    fn all_zero_weights_error() {
        let op = BlurOperator::from_psfs(&[psf(4, 1)], (0, 0)).unwrap();
        let d = StackedVector::filled(1, (4, 4), 0.0);
        assert!(matches!(
            build_dhat(&op, op.squared_psf_otfs(), &d),
            Err(Error::AllWeightsZero)
        ));
    }

    #[test]
    fn floor_keeps_scaling_positive() {
        let op = BlurOperator::from_psfs(&[Image::delta(4, 4, 0, 0)], (0, 0)).unwrap();
        let mut w = Image::zeros(4, 4);
        w.set(0, 0, 4.0);
        let d = StackedVector::new(vec![w]).unwrap();
        let dhat = build_dhat(&op, op.squared_psf_otfs(), &d).unwrap();
        assert!((dhat.get(0, 0) - 2.0).abs() < 1e-12);
        assert!((dhat.get(3, 3) - 2e-6).abs() < 1e-18);
    }

    #[test]
    fn identity_when_trivial() {
        let op = BlurOperator::from_psfs(&[Image::delta(5, 5, 2, 2)], (2, 2)).unwrap();
        let lap = LaplacianSymbol::new((5, 5)).unwrap();
        let m = Preconditioner::build(&op, &lap, &StackedVector::filled(1, (5, 5), 1.0), 0.0).unwrap();
        let r = random_image(5, 5, 3);
        let out = m.solve(&r).unwrap();
        for (a, b) in out.as_slice().iter().zip(r.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn solve_inverts_dense_assembly() {
        let n = 6;
        let p = psf(n, 9);
        let op = BlurOperator::from_psfs(&[p.clone()], (3, 3)).unwrap();
        let lap = LaplacianSymbol::new((n, n)).unwrap();
        let d = StackedVector::new(vec![positive(n, 10)]).unwrap();
        let m = Preconditioner::build(&op, &lap, &d, 0.2).unwrap();
        let r = random_image(n, n, 11);
        let y = m.solve(&r).unwrap();

        // M y = D̂ (AᵀA + λ̂LᵀL) D̂ y
        let a = circulant_from_psf(&p, (3, 3));
        let l = stencil_matrix(n, n);
        let dy: Vec<f64> = y.as_slice().iter().zip(m.dhat().as_slice()).map(|(u, v)| u * v).collect();
        let ata = dense_mul_t(&a, &dense_mul(&a, &dy));
        let ltl = dense_mul_t(&l, &dense_mul(&l, &dy));
        let my: Vec<f64> = ata
            .iter()
            .zip(&ltl)
            .zip(m.dhat().as_slice())
            .map(|((u, v), s)| s * (u + m.lambda_hat() * v))
            .collect();
        for (u, v) in my.iter().zip(r.as_slice()) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn solve_counts() {
        let op = BlurOperator::from_psfs(&[psf(8, 1)], (4, 4)).unwrap();
        let lap = LaplacianSymbol::new((8, 8)).unwrap();
        let m = Preconditioner::build(&op, &lap, &StackedVector::new(vec![positive(8, 2)]).unwrap(), 0.1).unwrap();
        let r = random_image(8, 8, 3);
        let (_, c) = counters::measure(|| m.solve(&r).unwrap());
        assert_eq!(c, OpCounts { fft2: 1, ifft2: 1, mults: 3, adds: 0 });
    }

    #[test]
    fn constant_weights_reproduce_hessian() {
        let n = 8;
        let op = BlurOperator::from_psfs(&[psf(n, 4)], (4, 4)).unwrap();
        let lap = LaplacianSymbol::new((n, n)).unwrap();
        let d = StackedVector::filled(1, (n, n), 2.5);
        let m = Preconditioner::build(&op, &lap, &d, 0.7).unwrap();
        let r = random_image(n, n, 5);
        let hr = hessian_apply(&op, &lap, &d, 0.7, &m.solve(&r).unwrap()).unwrap();
        for (a, b) in hr.as_slice().iter().zip(r.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    proptest::proptest! {
        #[test]
        fn inverse_is_spd(seed in 0u64..300, lambda in 0.01f64..1.0) {
            let n = 8;
            let op = BlurOperator::from_psfs(&[psf(n, seed)], (4, 4)).unwrap();
            let lap = LaplacianSymbol::new((n, n)).unwrap();
            let d = StackedVector::new(vec![positive(n, seed + 1)]).unwrap();
            let m = Preconditioner::build(&op, &lap, &d, lambda).unwrap();
            let r = random_image(n, n, seed + 2);
            let t = random_image(n, n, seed + 3);
            let mr = m.solve(&r).unwrap();
            let mt = m.solve(&t).unwrap();
            proptest::prop_assert!(r.dot(&mr) > 0.0);
            let scale = mr.norm() * t.norm();
            proptest::prop_assert!((t.dot(&mr) - r.dot(&mt)).abs() < 1e-9 * scale);
        }
    }
}
