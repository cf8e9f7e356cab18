//! Oracles shared by the acceptance suite. Nothing here calls into the
//! library's integration code.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn phi(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn big_phi(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn gelu(x: f64) -> f64 {
    x * big_phi(x)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Adaptive Simpson with Richardson correction.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, tol, 48)
}

/// `E[act(X) X^k]` for `X ~ N(μ, σ²)` by adaptive quadrature over the
/// standard-normal variable, split at the kink `z = −μ/σ` and on unit panels.
pub fn quadrature_moment(act: fn(f64) -> f64, k: i32, mu: f64, sigma: f64) -> f64 {
    quadrature_moment_tol(act, k, mu, sigma, 1e-13)
}

/// Like [`quadrature_moment`] with a per-panel tolerance relative to a coarse first pass,
/// for integrands too large for an absolute tolerance near machine precision.
#[allow(dead_code)]
pub fn quadrature_moment_relative(act: fn(f64) -> f64, k: i32, mu: f64, sigma: f64, rel: f64) -> f64 {
    let coarse = quadrature_moment_tol(act, k, mu, sigma, 1e-3);
    quadrature_moment_tol(act, k, mu, sigma, (rel * coarse.abs()).max(1e-20))
}

fn quadrature_moment_tol(act: fn(f64) -> f64, k: i32, mu: f64, sigma: f64, tol: f64) -> f64 {
    let f = |z: f64| {
        let x = mu + sigma * z;
        act(x) * x.powi(k) * phi(z)
    };
    let kink = -mu / sigma;
    let mut breaks: Vec<f64> = (-16..=16).map(f64::from).collect();
    if kink.abs() < 16.0 {
        breaks.push(kink);
    }
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    breaks.windows(2).map(|w| adaptive_simpson(&f, w[0], w[1], tol)).sum()
}

pub fn standard_normals(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Running mean and standard error.
#[derive(Clone, Copy, Default)]
pub struct MeanSe {
    n: f64,
    mean: f64,
    m2: f64,
}

impl MeanSe {
    pub fn push(&mut self, v: f64) {
        self.n += 1.0;
        let d = v - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (v - self.mean);
    }

    pub fn merge(mut self, o: &Self) -> Self {
        if o.n == 0.0 {
            return self;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        self.mean += d * o.n / n;
        self.m2 += o.m2 + d * d * self.n * o.n / n;
        self.n = n;
        self
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn se(&self) -> f64 {
        (self.m2 / (self.n - 1.0) / self.n).sqrt()
    }
}

pub fn random_spd(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal) * scale);
    &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * (0.1 * scale * scale)
}

pub fn random_vector(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal) * scale)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal) * scale)
}

/// Least squares of `f` on `[1, feats]` through the normal equations.
pub fn empirical_ols(feats: &DMatrix<f64>, f: &DMatrix<f64>) -> DMatrix<f64> {
    let n = feats.nrows();
    let p = feats.ncols();
    let mut a = DMatrix::from_element(n, p + 1, 1.0);
    a.columns_mut(1, p).copy_from(feats);
    let qr = a.qr();
    let qtf = qr.q().transpose() * f;
    qr.r().solve_upper_triangular(&qtf).expect("full rank design")
}

/// `[x, x_i x_j (i ≤ j)]`, lexicographic.
pub fn z_features(x: &DMatrix<f64>) -> DMatrix<f64> {
    let d = x.ncols();
    let pairs: Vec<(usize, usize)> = (0..d).flat_map(|i| (i..d).map(move |j| (i, j))).collect();
    DMatrix::from_fn(x.nrows(), d + pairs.len(), |r, c| {
        if c < d {
            x[(r, c)]
        } else {
            let (i, j) = pairs[c - d];
            x[(r, i)] * x[(r, j)]
        }
    })
}

/// FVU of `g` against `f`, computed directly.
pub fn fvu(f: &DMatrix<f64>, g: &DMatrix<f64>) -> f64 {
    let mean = f.row_mean();
    let mut num = 0.0;
    let mut den = 0.0;
    for r in 0..f.nrows() {
        for c in 0..f.ncols() {
            num += (f[(r, c)] - g[(r, c)]).powi(2);
            den += (f[(r, c)] - mean[c]).powi(2);
        }
    }
    num / den
}
