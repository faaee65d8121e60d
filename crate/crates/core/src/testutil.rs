//! Dense oracles for unit tests. Deliberately independent of the FFT path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grid::Image;

pub type Dense = Vec<Vec<f64>>;

pub fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0))
}

/// Explicit periodic convolution matrix for `psf` with kernel origin `center`.
pub fn circulant_from_psf(psf: &Image, center: (usize, usize)) -> Dense {
    let (h, w) = psf.dims();
    let n = h * w;
    let mut a = vec![vec![0.0; n]; n];
    for r in 0..h {
        for c in 0..w {
            for rr in 0..h {
                for cc in 0..w {
                    let i = (r + h - rr + center.0) % h;
                    let j = (c + w - cc + center.1) % w;
                    a[r * w + c][rr * w + cc] = psf.get(i, j);
                }
            }
        }
    }
    a
}

/// Periodic 5-point Laplacian: 4 on the diagonal, −1 on each neighbour.
pub fn stencil_matrix(h: usize, w: usize) -> Dense {
    let n = h * w;
    let mut l = vec![vec![0.0; n]; n];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            l[i][i] += 4.0;
            for (dr, dc) in [(1, 0), (h - 1, 0), (0, 1), (0, w - 1)] {
                let j = ((r + dr) % h) * w + (c + dc) % w;
                l[i][j] -= 1.0;
            }
        }
    }
    l
}

pub fn dense_mul(a: &Dense, x: &[f64]) -> Vec<f64> {
    a.iter()
        .map(|row| row.iter().zip(x).map(|(u, v)| u * v).sum())
        .collect()
}

pub fn dense_mul_t(a: &Dense, y: &[f64]) -> Vec<f64> {
    let n = a[0].len();
    let mut out = vec![0.0; n];
    for (row, yi) in a.iter().zip(y) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v * yi;
        }
    }
    out
}

/// Gaussian elimination with partial pivoting.
pub fn dense_solve(a: &Dense, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Dense = a.iter().map(|r| r.clone()).collect();
    let mut rhs = b.to_vec();
    for k in 0..n {
        let p = (k..n)
            .max_by(|&i, &j| m[i][k].abs().total_cmp(&m[j][k].abs()))
            .unwrap();
        m.swap(k, p);
        rhs.swap(k, p);
        for i in k + 1..n {
            let f = m[i][k] / m[k][k];
            for j in k..n {
                m[i][j] -= f * m[k][j];
            }
            rhs[i] -= f * rhs[k];
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| m[k][j] * x[j]).sum();
        x[k] = (rhs[k] - s) / m[k][k];
    }
    x
}
