//! Periodic blur operators, the Laplacian regularizer and the fused
//! Hessian-vector product `(AᵀDA + λLᵀL)s`.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::counters;
use crate::error::{dims_mismatch, Error, Result};
use crate::grid::{dft2, idft2, idft2_real, psf_to_otf, Image, Spectrum};

/// One image per observed frame; a vector in residual space.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedVector {
    frames: Vec<Image>,
}

impl StackedVector {
    pub fn new(frames: Vec<Image>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidParameter("stacked vector needs at least one frame".into()))?;
        let dims = first.dims();
        for f in &frames {
            f.check_dims(dims)?;
        }
        Ok(Self { frames })
    }

    pub fn filled(frames: usize, dims: (usize, usize), value: f64) -> Self {
        Self {
            frames: (0..frames)
                .map(|_| Image::filled(dims.0, dims.1, value))
                .collect(),
        }
    }

    pub fn frames(&self) -> &[Image] {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut [Image] {
        &mut self.frames
    }

    pub fn into_frames(self) -> Vec<Image> {
        self.frames
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }

    /// Total stacked length `m = frames * height * width`.
    pub fn len(&self) -> usize {
        self.frames.iter().map(Image::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.frames.iter().flat_map(|f| f.as_slice().iter().copied())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> StackedVector {
        Self {
            frames: self.frames.iter().map(|fr| fr.map(&f)).collect(),
        }
    }

    pub fn zip_map(&self, other: &StackedVector, f: impl Fn(f64, f64) -> f64) -> StackedVector {
        debug_assert_eq!(self.frame_count(), other.frame_count());
        Self {
            frames: self
                .frames
                .iter()
                .zip(&other.frames)
                .map(|(a, b)| a.zip_map(b, &f))
                .collect(),
        }
    }

    pub fn dot(&self, other: &StackedVector) -> f64 {
        self.frames
            .iter()
            .zip(&other.frames)
            .map(|(a, b)| a.dot(b))
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn max(&self) -> f64 {
        self.frames.iter().map(Image::max).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn check_shape(&self, frames: usize, dims: (usize, usize)) -> Result<()> {
        if self.frame_count() != frames {
            return Err(Error::DimensionMismatch {
                expected: format!("{frames} frames"),
                got: format!("{} frames", self.frame_count()),
            });
        }
        if self.dims() != dims {
            return Err(dims_mismatch(dims, self.dims()));
        }
        Ok(())
    }
}

/// Multi-frame periodic blur `A = [A_1; ...; A_k]`, each frame diagonalized by the 2D DFT.
#[derive(Debug, Clone)]
pub struct BlurOperator {
    dims: (usize, usize),
    otfs: Vec<Spectrum>,
    /// OTFs of the elementwise-squared PSFs, for the preconditioner scaling.
    sq_otfs: Vec<Spectrum>,
}

impl BlurOperator {
    pub fn from_otfs(otfs: Vec<Spectrum>) -> Result<Self> {
        let dims = otfs
            .first()
            .ok_or_else(|| Error::InvalidParameter("blur operator needs at least one frame".into()))?
            .dims();
        for o in &otfs {
            if o.dims() != dims {
                return Err(dims_mismatch(dims, o.dims()));
            }
        }
        // The rolled PSF is idft2(H); squaring commutes with the roll.
        let sq_otfs = otfs
            .iter()
            .map(|h| idft2(h).map(|p| dft2(&p.map(|v| v * v))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dims,
            otfs,
            sq_otfs,
        })
    }

    /// Builds one frame per full-grid PSF. All PSFs share the kernel origin `center`.
    pub fn from_psfs(psfs: &[Image], center: (usize, usize)) -> Result<Self> {
        let otfs = psfs
            .iter()
            .map(|p| psf_to_otf(p, center))
            .collect::<Result<Vec<_>>>()?;
        Self::from_otfs(otfs)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    pub fn frame_count(&self) -> usize {
        self.otfs.len()
    }

    pub fn otfs(&self) -> &[Spectrum] {
        &self.otfs
    }

    pub fn squared_psf_otfs(&self) -> &[Spectrum] {
        &self.sq_otfs
    }

    /// Residual-space length `m`.
    pub fn rows(&self) -> usize {
        self.frame_count() * self.dims.0 * self.dims.1
    }

    /// Frame `j` of `Ax` is `idft2(H_j ⊙ dft2(x))`.
    pub fn apply(&self, x: &Image) -> Result<StackedVector> {
        x.check_dims(self.dims)?;
        self.apply_spectrum(&dft2(x))
    }

    /// Same as [`apply`](Self::apply) for an already transformed `x̂`.
    pub fn apply_spectrum(&self, xhat: &Spectrum) -> Result<StackedVector> {
        if xhat.dims() != self.dims {
            return Err(dims_mismatch(self.dims, xhat.dims()));
        }
        let frames = self
            .otfs
            .iter()
            .map(|h| idft2_real(&pointwise(h, xhat, false)))
            .collect();
        Ok(StackedVector { frames })
    }

    /// `Aᵀy = Σ_j idft2(conj(H_j) ⊙ dft2(y_j))`
    pub fn apply_adjoint(&self, y: &StackedVector) -> Result<Image> {
        y.check_shape(self.frame_count(), self.dims)?;
        adjoint_with(&self.otfs, y)
    }
}

fn adjoint_with(otfs: &[Spectrum], y: &StackedVector) -> Result<Image> {
    let mut acc: Option<Spectrum> = None;
    for (h, yj) in otfs.iter().zip(&y.frames) {
        let term = pointwise(h, &dft2(yj), true);
        acc = Some(match acc {
            None => term,
            Some(a) => {
                counters::adds(1);
                a.add(&term)
            }
        });
    }
    Ok(idft2_real(&acc.expect("at least one frame")))
}

/// Adjoint of the operator whose frames have eigenvalues `otfs`.
pub(crate) fn adjoint_with_symbols(otfs: &[Spectrum], y: &StackedVector) -> Result<Image> {
    if otfs.len() != y.frame_count() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} frames", otfs.len()),
            got: format!("{} frames", y.frame_count()),
        });
    }
    adjoint_with(otfs, y)
}

/// Counted pixel-wise product `h ⊙ x` (or `conj(h) ⊙ x`).
fn pointwise(h: &Spectrum, x: &Spectrum, conjugate: bool) -> Spectrum {
    counters::mults(1);
    let values = h
        .as_slice()
        .iter()
        .zip(x.as_slice())
        .map(|(a, b)| if conjugate { a.conj() * b } else { a * b })
        .collect();
    Spectrum::new(h.height(), h.width(), values).expect("same dims")
}

/// Squared DFT eigenvalues of the periodic 5-point Laplacian.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianSymbol {
    dims: (usize, usize),
    sq_symbol: Vec<f64>,
}

impl LaplacianSymbol {
    /// Stencil: 4 on the center, −1 on the four periodic neighbours, so
    /// `λ(k, l) = 4 − 2cos(2πk/h) − 2cos(2πl/w)`.
    pub fn new(dims: (usize, usize)) -> Result<Self> {
        let (h, w) = dims;
        if h < 2 || w < 2 {
            return Err(Error::InvalidParameter(format!(
                "laplacian needs at least 2 pixels per side, got {h}x{w}"
            )));
        }
        let mut sq_symbol = Vec::with_capacity(h * w);
        for k in 0..h {
            let ck = (2.0 * PI * k as f64 / h as f64).cos();
            for l in 0..w {
                let cl = (2.0 * PI * l as f64 / w as f64).cos();
                let ev = 4.0 - 2.0 * ck - 2.0 * cl;
                sq_symbol.push(ev * ev);
            }
        }
        Ok(Self { dims, sq_symbol })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    pub fn sq_symbol(&self) -> &[f64] {
        &self.sq_symbol
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.sq_symbol[row * self.dims.1 + col]
    }

    /// `L x`, with the symbol recovered as the nonnegative root of the stored square.
    pub fn apply_l(&self, x: &Image) -> Result<Image> {
        x.check_dims(self.dims)?;
        let mut xhat = dft2(x);
        for (v, s) in xhat.as_mut_slice().iter_mut().zip(&self.sq_symbol) {
            *v *= s.sqrt();
        }
        Ok(idft2_real(&xhat))
    }

    /// `LᵀL x`
    pub fn apply_normal(&self, x: &Image) -> Result<Image> {
        x.check_dims(self.dims)?;
        let mut xhat = dft2(x);
        for (v, s) in xhat.as_mut_slice().iter_mut().zip(&self.sq_symbol) {
            *v *= s;
        }
        Ok(idft2_real(&xhat))
    }

    /// `‖Lx‖²` from `x̂ = dft2(x)` via Parseval.
    pub fn norm_sq_from_spectrum(&self, xhat: &Spectrum) -> f64 {
        let n = self.sq_symbol.len() as f64;
        xhat.as_slice()
            .iter()
            .zip(&self.sq_symbol)
            .map(|(v, s)| s * v.norm_sqr())
            .sum::<f64>()
            / n
    }
}

fn check_weights(weights: &StackedVector) -> Result<()> {
    for (i, w) in weights.iter().enumerate() {
        if !(w >= 0.0) || !w.is_finite() {
            return Err(Error::InvalidWeight { index: i, value: w });
        }
    }
    Ok(())
}

/// `(AᵀDA + λLᵀL) s` with the fused transform schedule.
///
/// Single frame: 2 forward and 2 inverse transforms, 4 pixel-wise products
/// and 1 addition. Each extra frame adds one transform pair, 3 products and
/// 1 addition.
pub fn hessian_apply(
    op: &BlurOperator,
    lap: &LaplacianSymbol,
    weights: &StackedVector,
    lambda: f64,
    s: &Image,
) -> Result<Image> {
    s.check_dims(op.dims)?;
    if lap.dims != op.dims {
        return Err(dims_mismatch(op.dims, lap.dims));
    }
    weights.check_shape(op.frame_count(), op.dims)?;
    check_weights(weights)?;
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!("lambda must be finite and >= 0, got {lambda}")));
    }

    let shat = dft2(s);
    let mut acc: Option<Spectrum> = None;
    for (h, d) in op.otfs.iter().zip(&weights.frames) {
        let t = idft2_real(&pointwise(h, &shat, false));
        counters::mults(1);
        let u = t.zip_map(d, |a, b| a * b);
        let term = pointwise(h, &dft2(&u), true);
        acc = Some(match acc {
            None => term,
            Some(a) => {
                counters::adds(1);
                a.add(&term)
            }
        });
    }
    let mut acc = acc.expect("at least one frame");
    // λ·|L|²·ŝ fused into the accumulation: one product pass, one addition.
    counters::mults(1);
    counters::adds(1);
    for ((a, v), sq) in acc
        .as_mut_slice()
        .iter_mut()
        .zip(shat.as_slice())
        .zip(&lap.sq_symbol)
    {
        *a += Complex64::new(lambda * sq, 0.0) * v;
    }
    Ok(idft2_real(&acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{circulant_from_psf, dense_mul, dense_mul_t, random_image, stencil_matrix};

    fn random_psf(n: usize, seed: u64) -> Image {
        let p = random_image(n, n, seed).map(f64::abs);
        p.scaled(1.0 / p.sum())
    }

    fn flat(v: &StackedVector) -> Vec<f64> {
        v.iter().collect()
    }

    #[test]
    fn delta_psf_reproduces_input_in_every_frame() {
        let psf = Image::delta(5, 5, 2, 2);
        let op = BlurOperator::from_psfs(&[psf.clone(), psf], (2, 2)).unwrap();
        let x = random_image(5, 5, 1);
        let y = op.apply(&x).unwrap();
        for f in y.frames() {
            for (a, b) in f.as_slice().iter().zip(x.as_slice()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let back = op.apply_adjoint(&y).unwrap();
        for (a, b) in back.as_slice().iter().zip(x.as_slice()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalized_psf_preserves_constants() {
        let op = BlurOperator::from_psfs(&[random_psf(6, 3)], (2, 3)).unwrap();
        let y = op.apply(&Image::filled(6, 6, 7.5)).unwrap();
        assert!(y.iter().all(|v| (v - 7.5).abs() < 1e-12));
    }

    #[test]
    fn apply_and_adjoint_match_dense_circulant() {
        let psf = random_psf(6, 11);
        let center = (2, 3);
        let op = BlurOperator::from_psfs(&[psf.clone()], center).unwrap();
        let a = circulant_from_psf(&psf, center);
        let x = random_image(6, 6, 12);
        let y = op.apply(&x).unwrap();
        let dense = dense_mul(&a, x.as_slice());
        for (u, v) in flat(&y).iter().zip(&dense) {
            assert!((u - v).abs() < 1e-10);
        }
        let r = StackedVector::new(vec![random_image(6, 6, 13)]).unwrap();
        let at = op.apply_adjoint(&r).unwrap();
        let dense_t = dense_mul_t(&a, &flat(&r));
        for (u, v) in at.as_slice().iter().zip(&dense_t) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn adjoint_identity_multi_frame() {
        let op = BlurOperator::from_psfs(&[random_psf(8, 1), random_psf(8, 2)], (4, 4)).unwrap();
        let x = random_image(8, 8, 3);
        let y = StackedVector::new(vec![random_image(8, 8, 4), random_image(8, 8, 5)]).unwrap();
        let lhs = op.apply(&x).unwrap().dot(&y);
        let rhs = x.dot(&op.apply_adjoint(&y).unwrap());
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn multi_frame_apply_stacks_single_frames() {
        let (p1, p2) = (random_psf(6, 1), random_psf(6, 2));
        let both = BlurOperator::from_psfs(&[p1.clone(), p2.clone()], (1, 1)).unwrap();
        let x = random_image(6, 6, 9);
        let y = both.apply(&x).unwrap();
        let y1 = BlurOperator::from_psfs(&[p1], (1, 1)).unwrap().apply(&x).unwrap();
        let y2 = BlurOperator::from_psfs(&[p2], (1, 1)).unwrap().apply(&x).unwrap();
        assert_eq!(y.frames()[0], y1.frames()[0]);
        assert_eq!(y.frames()[1], y2.frames()[0]);
    }

    #[test]
    fn laplacian_symbol_values() {
        let lap = LaplacianSymbol::new((4, 4)).unwrap();
        assert_eq!(lap.get(0, 0), 0.0);
        assert!((lap.get(2, 2) - 64.0).abs() < 1e-12);
        assert!(lap.sq_symbol().iter().all(|&v| v >= 0.0));
        assert!(LaplacianSymbol::new((1, 4)).is_err());
    }

    #[test]
    fn laplacian_matches_stencil_matrix() {
        let lap = LaplacianSymbol::new((6, 6)).unwrap();
        let l = stencil_matrix(6, 6);
        let x = random_image(6, 6, 21);
        let fast = lap.apply_l(&x).unwrap();
        let dense = dense_mul(&l, x.as_slice());
        for (a, b) in fast.as_slice().iter().zip(&dense) {
            assert!((a - b).abs() < 1e-10);
        }
        let xhat = dft2(&x);
        let nsq: f64 = dense.iter().map(|v| v * v).sum();
        assert!((lap.norm_sq_from_spectrum(&xhat) - nsq).abs() < 1e-10 * nsq);
    }

    #[test]
    fn hessian_counts_single_frame() {
        let op = BlurOperator::from_psfs(&[random_psf(8, 1)], (4, 4)).unwrap();
        let lap = LaplacianSymbol::new((8, 8)).unwrap();
        let d = StackedVector::filled(1, (8, 8), 0.5);
        let s = random_image(8, 8, 2);
        let (_, c) = counters::measure(|| hessian_apply(&op, &lap, &d, 0.1, &s).unwrap());
        assert_eq!(
            c,
            counters::OpCounts {
                fft2: 2,
                ifft2: 2,
                mults: 4,
                adds: 1
            }
        );
    }

    #[test]
    fn hessian_pure_regularization() {
        let op = BlurOperator::from_psfs(&[random_psf(6, 1)], (0, 0)).unwrap();
        let lap = LaplacianSymbol::new((6, 6)).unwrap();
        let d = StackedVector::filled(1, (6, 6), 0.0);
        let s = random_image(6, 6, 4);
        let h = hessian_apply(&op, &lap, &d, 1.0, &s).unwrap();
        let expect = lap.apply_normal(&s).unwrap();
        for (a, b) in h.as_slice().iter().zip(expect.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn hessian_matches_dense_oracle() {
        let n = 6;
        let psfs = [random_psf(n, 31), random_psf(n, 32)];
        let center = (3, 2);
        let op = BlurOperator::from_psfs(&psfs, center).unwrap();
        let lap = LaplacianSymbol::new((n, n)).unwrap();
        let d = StackedVector::new(vec![
            random_image(n, n, 33).map(f64::abs),
            random_image(n, n, 34).map(f64::abs),
        ])
        .unwrap();
        let lambda = 0.37;
        let s = random_image(n, n, 35);
        let fast = hessian_apply(&op, &lap, &d, lambda, &s).unwrap();

        let l = stencil_matrix(n, n);
        let ls = dense_mul(&l, s.as_slice());
        let mut expect: Vec<f64> = dense_mul_t(&l, &ls).iter().map(|v| lambda * v).collect();
        for (psf, dj) in psfs.iter().zip(d.frames()) {
            let a = circulant_from_psf(psf, center);
            let as_ = dense_mul(&a, s.as_slice());
            let das: Vec<f64> = as_.iter().zip(dj.as_slice()).map(|(u, w)| u * w).collect();
            for (e, v) in expect.iter_mut().zip(dense_mul_t(&a, &das)) {
                *e += v;
            }
        }
        for (a, b) in fast.as_slice().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn hessian_rejects_negative_weights() {
        let op = BlurOperator::from_psfs(&[random_psf(4, 1)], (0, 0)).unwrap();
        let lap = LaplacianSymbol::new((4, 4)).unwrap();
        let mut d = StackedVector::filled(1, (4, 4), 1.0);
        d.frames_mut()[0].set(1, 1, -0.1);
        let err = hessian_apply(&op, &lap, &d, 0.0, &Image::zeros(4, 4)).unwrap_err();
        assert!(matches!(err, Error::InvalidWeight { index: 5, .. }));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let op = BlurOperator::from_psfs(&[random_psf(4, 1)], (0, 0)).unwrap();
        assert!(matches!(
            op.apply(&Image::zeros(4, 5)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    proptest::proptest! {
        #[test]
        fn hessian_symmetric_psd(seed in 0u64..500, lambda in 0.0f64..2.0) {
            let n = 6;
            let op = BlurOperator::from_psfs(&[random_psf(n, seed)], (2, 2)).unwrap();
            let lap = LaplacianSymbol::new((n, n)).unwrap();
            let d = StackedVector::new(vec![random_image(n, n, seed + 1).map(f64::abs)]).unwrap();
            let s = random_image(n, n, seed + 2);
            let t = random_image(n, n, seed + 3);
            let hs = hessian_apply(&op, &lap, &d, lambda, &s).unwrap();
            let ht = hessian_apply(&op, &lap, &d, lambda, &t).unwrap();
            let scale = hs.norm() * t.norm() + 1.0;
            proptest::prop_assert!((hs.dot(&t) - s.dot(&ht)).abs() < 1e-10 * scale);
            proptest::prop_assert!(s.dot(&hs) >= -1e-10 * s.norm_sq());
        }
    }
}
