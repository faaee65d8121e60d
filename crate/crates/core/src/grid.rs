//! Pixel grids and the 2D discrete Fourier transform.
//!
//! Convention: `dft2` is unnormalized, `idft2` carries the `1/N` factor.
//! Every operator symbol in this crate assumes that pairing.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::counters;
use crate::error::{dims_mismatch, Error, Result};

/// Relative size of imaginary residue that `idft2` silently discards.
pub const IMAG_RESIDUE_TOL: f64 = 1e-10;

/// Real-valued 2D pixel grid stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidImage(format!("empty grid {height}x{width}")));
        }
        if values.len() != height * width {
            return Err(Error::InvalidImage(format!(
                "{} values for a {height}x{width} grid",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidImage(format!(
                "non-finite value {} at index {i}",
                values[i]
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "empty grid");
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    /// Builds an image from a function of `(row, col)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(height > 0 && width > 0, "empty grid");
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            values,
        }
    }

    /// Unit impulse at `(row, col)`.
    pub fn delta(height: usize, width: usize, row: usize, col: usize) -> Self {
        let mut img = Self::zeros(height, width);
        img.values[row * width + col] = 1.0;
        img
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[row * self.width + col] = value;
    }

    pub fn check_dims(&self, dims: (usize, usize)) -> Result<()> {
        if self.dims() != dims {
            return Err(dims_mismatch(dims, self.dims()));
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn dot(&self, other: &Image) -> f64 {
        debug_assert_eq!(self.dims(), other.dims());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Image {
        debug_assert_eq!(self.dims(), other.dims());
        Image {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn scaled(&self, a: f64) -> Image {
        self.map(|v| a * v)
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &Image) {
        debug_assert_eq!(self.dims(), other.dims());
        for (s, o) in self.values.iter_mut().zip(&other.values) {
            *s += a * o;
        }
    }

    /// Circular shift: the value at `(r, c)` moves to `(r + dy, c + dx)` modulo the grid.
    pub fn circshift(&self, dy: isize, dx: isize) -> Image {
        let (h, w) = (self.height as isize, self.width as isize);
        let mut out = Image::zeros(self.height, self.width);
        for r in 0..h {
            let nr = (r + dy).rem_euclid(h) as usize;
            for c in 0..w {
                let nc = (c + dx).rem_euclid(w) as usize;
                out.values[nr * self.width + nc] = self.values[(r * w + c) as usize];
            }
        }
        out
    }

    /// Places `self` into a zero grid of size `height x width` at the top-left corner.
    pub fn zero_pad(&self, height: usize, width: usize) -> Result<Image> {
        if self.height > height || self.width > width {
            return Err(Error::InvalidImage(format!(
                "cannot pad {}x{} into {height}x{width}",
                self.height, self.width
            )));
        }
        let mut out = Image::zeros(height, width);
        for r in 0..self.height {
            out.values[r * width..r * width + self.width]
                .copy_from_slice(&self.values[r * self.width..(r + 1) * self.width]);
        }
        Ok(out)
    }
}

/// Complex frequency-domain coefficients, row-major, same grid as the image.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    height: usize,
    width: usize,
    values: Vec<Complex64>,
}

impl Spectrum {
    pub fn new(height: usize, width: usize, values: Vec<Complex64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::InvalidImage(format!(
                "{} coefficients for a {height}x{width} spectrum",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.values[row * self.width + col]
    }

    pub fn scaled(&self, a: f64) -> Spectrum {
        Spectrum {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| v * a).collect(),
        }
    }

    pub fn add(&self, other: &Spectrum) -> Spectrum {
        debug_assert_eq!(self.dims(), other.dims());
        Spectrum {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }
}

struct PlanCache {
    planner: FftPlanner<f64>,
    plans: HashMap<(usize, bool), Arc<dyn Fft<f64>>>,
}

fn plan(len: usize, direction: FftDirection) -> Arc<dyn Fft<f64>> {
    static CACHE: OnceLock<Mutex<PlanCache>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| {
        Mutex::new(PlanCache {
            planner: FftPlanner::new(),
            plans: HashMap::new(),
        })
    });
    let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
    let key = (len, direction == FftDirection::Forward);
    if let Some(p) = guard.plans.get(&key) {
        return Arc::clone(p);
    }
    let p = guard.planner.plan_fft(len, direction);
    guard.plans.insert(key, Arc::clone(&p));
    p
}

fn transpose(height: usize, width: usize, src: &[Complex64], dst: &mut [Complex64]) {
    for r in 0..height {
        for c in 0..width {
            dst[c * height + r] = src[r * width + c];
        }
    }
}

/// Unnormalized in-place 2D transform of a row-major `height x width` buffer.
fn fft2_in_place(height: usize, width: usize, buf: &mut [Complex64], direction: FftDirection) {
    let rows = plan(width, direction);
    let mut scratch = vec![Complex64::default(); rows.get_inplace_scratch_len()];
    for row in buf.chunks_exact_mut(width) {
        rows.process_with_scratch(row, &mut scratch);
    }
    let cols = plan(height, direction);
    let mut tmp = vec![Complex64::default(); buf.len()];
    transpose(height, width, buf, &mut tmp);
    scratch.resize(cols.get_inplace_scratch_len(), Complex64::default());
    for col in tmp.chunks_exact_mut(height) {
        cols.process_with_scratch(col, &mut scratch);
    }
    transpose(width, height, &tmp, buf);
}

/// Forward 2D DFT, unnormalized.
pub fn dft2(img: &Image) -> Spectrum {
    counters::fft2();
    let mut values: Vec<Complex64> = img.values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_in_place(img.height, img.width, &mut values, FftDirection::Forward);
    Spectrum {
        height: img.height,
        width: img.width,
        values,
    }
}

/// Inverse 2D DFT with the `1/N` factor.
///
/// The imaginary part is dropped when its norm stays below
/// [`IMAG_RESIDUE_TOL`] times the norm of the result; anything larger means
/// the spectrum was not Hermitian and is reported as an error.
pub fn idft2(spec: &Spectrum) -> Result<Image> {
    counters::ifft2();
    let mut values = spec.values.clone();
    fft2_in_place(spec.height, spec.width, &mut values, FftDirection::Inverse);
    let scale = 1.0 / values.len() as f64;
    let mut re_sq = 0.0;
    let mut im_sq = 0.0;
    let real: Vec<f64> = values
        .iter()
        .map(|v| {
            let c = v * scale;
            re_sq += c.re * c.re;
            im_sq += c.im * c.im;
            c.re
        })
        .collect();
    let norm = (re_sq + im_sq).sqrt();
    let residue = im_sq.sqrt();
    if residue > IMAG_RESIDUE_TOL * norm {
        return Err(Error::ImaginaryResidue { residue, norm });
    }
    Image::new(spec.height, spec.width, real)
}

/// Inverse transform keeping only the real part.
///
/// For products of Hermitian symbols with real-signal spectra, where the
/// imaginary part is round-off by construction. Cancellation in sums of such
/// products can leave residue well above [`IMAG_RESIDUE_TOL`] relative to a
/// small result, so no check is made here.
pub(crate) fn idft2_real(spec: &Spectrum) -> Image {
    counters::ifft2();
    let mut values = spec.values.clone();
    fft2_in_place(spec.height, spec.width, &mut values, FftDirection::Inverse);
    let scale = 1.0 / values.len() as f64;
    Image {
        height: spec.height,
        width: spec.width,
        values: values.iter().map(|v| v.re * scale).collect(),
    }
}

/// Operator eigenvalues of a periodic convolution with `psf`.
///
/// The PSF must already live on the full grid; `center` is the pixel that
/// acts as the kernel origin and is rolled to index `(0, 0)` before the
/// transform.
pub fn psf_to_otf(psf: &Image, center: (usize, usize)) -> Result<Spectrum> {
    let (row, col) = center;
    if row >= psf.height || col >= psf.width {
        return Err(Error::CenterOutsideGrid {
            row,
            col,
            height: psf.height,
            width: psf.width,
        });
    }
    let shifted = psf.circshift(-(row as isize), -(col as isize));
    Ok(dft2(&shifted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0))
    }

    fn naive_dft(img: &Image) -> Vec<Complex64> {
        let (h, w) = img.dims();
        let mut out = vec![Complex64::default(); h * w];
        for k in 0..h {
            for l in 0..w {
                let mut acc = Complex64::default();
                for r in 0..h {
                    for c in 0..w {
                        let phase = -2.0
                            * std::f64::consts::PI
                            * ((k * r) as f64 / h as f64 + (l * c) as f64 / w as f64);
                        acc += img.get(r, c) * Complex64::from_polar(1.0, phase);
                    }
                }
                out[k * w + l] = acc;
            }
        }
        out
    }

    #[test]
    fn constant_image_concentrates_at_zero_frequency() {
        let spec = dft2(&Image::filled(4, 4, 1.0));
        assert!((spec.get(0, 0) - Complex64::new(16.0, 0.0)).norm() < 1e-12);
        for (i, v) in spec.as_slice().iter().enumerate().skip(1) {
            assert!(v.norm() < 1e-12, "bin {i} = {v}");
        }
    }

    #[test]
    fn delta_transforms_to_ones() {
        for (h, w) in [(4, 4), (5, 7), (1, 3)] {
            let spec = dft2(&Image::delta(h, w, 0, 0));
            for v in spec.as_slice() {
                assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_naive_dft() {
        for (h, w) in [(8, 8), (5, 6)] {
            let img = random_image(h, w, 7);
            let fast = dft2(&img);
            let slow = naive_dft(&img);
            for (a, b) in fast.as_slice().iter().zip(&slow) {
                assert!((a - b).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn ones_spectrum_inverts_to_delta() {
        let spec = Spectrum::new(4, 4, vec![Complex64::new(1.0, 0.0); 16]).unwrap();
        let img = idft2(&spec).unwrap();
        assert!((img.get(0, 0) - 1.0).abs() < 1e-14);
        assert!(img.as_slice()[1..].iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn round_trip_on_odd_and_even_sizes() {
        for n in [4, 8, 16, 17, 31] {
            let img = random_image(n, n, n as u64);
            let back = idft2(&dft2(&img)).unwrap();
            let mut diff = back.clone();
            diff.axpy(-1.0, &img);
            assert!(diff.norm() / img.norm() < 1e-12, "size {n}");
        }
    }

    #[test]
    fn parseval() {
        for n in [4, 17, 31] {
            let img = random_image(n, n + 2, 3);
            let spec = dft2(&img);
            let lhs: f64 = spec.as_slice().iter().map(|v| v.norm_sqr()).sum();
            let rhs = img.len() as f64 * img.norm_sq();
            assert!((lhs - rhs).abs() / rhs < 1e-10);
        }
    }

    #[test]
    fn inverse_is_linear() {
        let x = dft2(&random_image(6, 6, 1));
        let y = dft2(&random_image(6, 6, 2));
        let combo = x.scaled(2.5).add(&y.scaled(-0.75));
        let lhs = idft2(&combo).unwrap();
        let mut rhs = idft2(&x).unwrap().scaled(2.5);
        rhs.axpy(-0.75, &idft2(&y).unwrap());
        let mut diff = lhs;
        diff.axpy(-1.0, &rhs);
        assert!(diff.norm() < 1e-12);
    }

    #[test]
    fn non_hermitian_spectrum_is_rejected() {
        let mut values = vec![Complex64::default(); 16];
        values[1] = Complex64::new(0.0, 1.0);
        let spec = Spectrum::new(4, 4, values).unwrap();
        assert!(matches!(idft2(&spec), Err(Error::ImaginaryResidue { .. })));
    }

    #[test]
    fn centered_delta_psf_is_identity_symbol() {
        let otf = psf_to_otf(&Image::delta(8, 8, 3, 3), (3, 3)).unwrap();
        for v in otf.as_slice() {
            assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn symmetric_psf_has_real_symbol() {
        let psf = Image::from_fn(9, 9, |r, c| {
            let (dr, dc) = (r as f64 - 4.0, c as f64 - 4.0);
            (-(dr * dr + 2.0 * dc * dc) / 3.0).exp()
        });
        let otf = psf_to_otf(&psf, (4, 4)).unwrap();
        assert!(otf.as_slice().iter().all(|v| v.im.abs() < 1e-12));
    }

    #[test]
    fn unit_mass_psf_has_unit_dc() {
        let raw = random_image(7, 7, 9).map(f64::abs);
        let psf = raw.scaled(1.0 / raw.sum());
        let otf = psf_to_otf(&psf, (2, 5)).unwrap();
        assert!((otf.get(0, 0) - Complex64::new(1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn center_outside_grid_errors() {
        let psf = Image::zeros(4, 4);
        assert!(matches!(
            psf_to_otf(&psf, (4, 0)),
            Err(Error::CenterOutsideGrid { .. })
        ));
    }

    #[test]
    fn image_rejects_non_finite() {
        assert!(Image::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Image::new(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn counts_transforms() {
        let img = random_image(4, 4, 0);
        let (_, counts) = counters::measure(|| idft2(&dft2(&img)).unwrap());
        assert_eq!((counts.fft2, counts.ifft2), (1, 1));
    }

    proptest::proptest! {
        #[test]
        fn round_trip_any_size(h in 1usize..12, w in 1usize..12, seed in 0u64..1000) {
            let img = random_image(h, w, seed);
            let back = idft2(&dft2(&img)).unwrap();
            for (a, b) in back.as_slice().iter().zip(img.as_slice()) {
                proptest::prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
