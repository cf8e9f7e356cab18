//! Scalar special functions and fixed-order quadrature.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::OnceLock;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density.
#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal CDF, via `erfc` so both tails keep full relative precision.
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc.round()
}

/// `(n-1)!!` for even `n`, i.e. `E[Z^n]` for a standard normal; zero for odd `n`.
pub fn standard_normal_moment(n: usize) -> f64 {
    if n % 2 == 1 {
        return 0.0;
    }
    let mut acc = 1.0;
    let mut m = n as i64 - 1;
    while m > 1 {
        acc *= m as f64;
        m -= 2;
    }
    acc
}

/// `E[X^n]` for `X ~ N(mu, sigma^2)`.
pub fn gaussian_raw_moment(n: usize, mu: f64, sigma: f64) -> f64 {
    (0..=n)
        .step_by(2)
        .map(|j| binomial(n, j) * mu.powi((n - j) as i32) * sigma.powi(j as i32) * standard_normal_moment(j))
        .sum()
}

/// Gauss–Legendre nodes and weights on `[-1, 1]` by Newton iteration on `P_n`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 1 { x } else { p1 };
            let pm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * p - pm1) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

pub const LEGENDRE_ORDER: usize = 20;

fn legendre_rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(LEGENDRE_ORDER))
}

/// Composite Gauss–Legendre over `[a, b]` with `panels` equal panels, for a
/// vector-valued integrand writing into `out` (accumulated, not reset).
pub fn composite_legendre_vec<F>(a: f64, b: f64, panels: usize, out: &mut [f64], mut f: F)
where
    F: FnMut(f64, f64, &mut [f64]),
{
    let (nodes, weights) = legendre_rule();
    let h = (b - a) / panels as f64;
    for p in 0..panels {
        let lo = a + p as f64 * h;
        let mid = lo + 0.5 * h;
        for (t, w) in nodes.iter().zip(weights) {
            f(mid + 0.5 * h * t, 0.5 * h * w, out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_integrates_polynomials_exactly() {
        let (x, w) = gauss_legendre(7);
        // degree 13 is the exactness limit for 7 nodes
        let val: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(12)).sum();
        assert!((val - 2.0 / 13.0).abs() < 1e-14);
        let total: f64 = w.iter().sum();
        assert!((total - 2.0).abs() < 1e-14);
    }

    #[test]
    fn cdf_tails_and_center() {
        assert_eq!(norm_cdf(0.0), 0.5);
        assert!((norm_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!((norm_cdf(-10.0) - 7.619_853_024_160_527e-24).abs() < 1e-36);
    }

    #[test]
    fn raw_moments() {
        assert_eq!(gaussian_raw_moment(4, 0.0, 1.0), 3.0);
        // E[X^3] = mu^3 + 3 mu sigma^2
        assert!((gaussian_raw_moment(3, 1.5, 2.0) - (3.375 + 18.0)).abs() < 1e-12);
        assert_eq!(binomial(7, 3), 35.0);
    }
}
