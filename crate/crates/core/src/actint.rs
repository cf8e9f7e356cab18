//! Univariate Gaussian integrals `E[g(X)·X^k]` for `X ~ N(mu, sigma^2)`.
//!
//! ReLU moments are exact: a binomial expansion over half-line moments of the
//! standard normal, each obtained by the two-term recursion. GELU moments use
//! composite Gauss–Legendre quadrature in the standardized variable, with the
//! panels refined around the point where `Φ(mu + sigma z)` switches on.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{binomial, composite_legendre_vec, gaussian_raw_moment, norm_cdf, norm_pdf};

/// Highest `k` accepted by [`act_moment`].
pub const MAX_MOMENT_DEGREE: usize = 6;
/// Highest `k` accepted by [`halfline_gaussian_moment`].
pub const MAX_HALFLINE_DEGREE: usize = 8;
/// Absolute accuracy target of the GELU quadrature.
pub const QUADRATURE_TOL: f64 = 1e-10;
/// Agreement target between the half-line recursion and direct integration.
pub const RECURSION_TOL: f64 = 1e-12;
/// Half-width of the standardized integration window; `φ(14) ≈ 1e-43`.
pub const QUADRATURE_HALF_WIDTH: f64 = 14.0;

/// Past this point the half-line moments equal their limits to machine precision.
const HALFLINE_CLAMP: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// Exact `x·Φ(x)`, not the tanh approximation.
    Gelu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => x * norm_cdf(x),
            Activation::Identity => x,
        }
    }

    /// Derivative; ReLU at exactly zero takes the subgradient midpoint 0.5.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    0.0
                } else {
                    0.5
                }
            }
            Activation::Gelu => norm_cdf(x) + x * norm_pdf(x),
            Activation::Identity => 1.0,
        }
    }

    /// Stable numeric tag used in tensor bundles.
    pub fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Gelu => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Relu),
            2 => Ok(Activation::Gelu),
            other => Err(Error::invalid(format!("unknown activation code {other}"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::invalid(format!("unknown activation '{other}'"))),
        }
    }
}

/// `N(mu, sigma^2)`; `sigma = 0` is the point mass at `mu`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarGaussian {
    pub mu: f64,
    pub sigma: f64,
}

impl ScalarGaussian {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !mu.is_finite() || !sigma.is_finite() || sigma < 0.0 {
            return Err(Error::invalid(format!("scalar gaussian needs finite mu and sigma >= 0 (got {mu}, {sigma})")));
        }
        Ok(Self { mu, sigma })
    }

    pub fn from_variance(mu: f64, var: f64) -> Result<Self> {
        Self::new(mu, var.max(0.0).sqrt())
    }
}

/// `∫_a^∞ z^k φ(z) dz`.
pub fn halfline_gaussian_moment(k: usize, a: f64) -> Result<f64> {
    if k > MAX_HALFLINE_DEGREE {
        return Err(Error::DegreeTooHigh { degree: k, max: MAX_HALFLINE_DEGREE });
    }
    if a.is_nan() {
        return Err(Error::invalid("half-line bound is NaN"));
    }
    Ok(halfline_moments(k, a)[k])
}

/// All half-line moments `I_0..=I_kmax` at lower bound `a`:
/// `I_0 = 1 - Φ(a)`, `I_1 = φ(a)`, `I_k = a^{k-1} φ(a) + (k-1) I_{k-2}`.
pub(crate) fn halfline_moments(kmax: usize, a: f64) -> Vec<f64> {
    let a = a.clamp(-HALFLINE_CLAMP, HALFLINE_CLAMP);
    let pdf = norm_pdf(a);
    let mut out = Vec::with_capacity(kmax + 1);
    out.push(norm_cdf(-a));
    if kmax >= 1 {
        out.push(pdf);
    }
    for k in 2..=kmax {
        let v = a.powi(k as i32 - 1) * pdf + (k - 1) as f64 * out[k - 2];
        out.push(v);
    }
    out
}

/// `E[act(X)·X^k]`.
pub fn act_moment(act: Activation, k: usize, g: ScalarGaussian) -> Result<f64> {
    Ok(act_moments(act, k, g)?[k])
}

/// `E[act(X)·X^k]` for every `k` in `0..=kmax`, sharing one pass.
pub fn act_moments(act: Activation, kmax: usize, g: ScalarGaussian) -> Result<Vec<f64>> {
    if kmax > MAX_MOMENT_DEGREE {
        return Err(Error::DegreeTooHigh { degree: kmax, max: MAX_MOMENT_DEGREE });
    }
    let g = ScalarGaussian::new(g.mu, g.sigma)?;
    Ok(act_moments_unchecked(act, kmax, g))
}

pub(crate) fn act_moments_unchecked(act: Activation, kmax: usize, g: ScalarGaussian) -> Vec<f64> {
    let ScalarGaussian { mu, sigma } = g;
    if sigma == 0.0 {
        let base = act.apply(mu);
        return (0..=kmax).map(|k| base * mu.powi(k as i32)).collect();
    }
    match act {
        Activation::Identity => (0..=kmax).map(|k| gaussian_raw_moment(k + 1, mu, sigma)).collect(),
        Activation::Relu => {
            let half = halfline_moments(kmax + 1, -mu / sigma);
            (0..=kmax)
                .map(|k| {
                    let n = k + 1;
                    (0..=n)
                        .map(|j| binomial(n, j) * mu.powi((n - j) as i32) * sigma.powi(j as i32) * half[j])
                        .sum()
                })
                .collect()
        }
        Activation::Gelu => gelu_moments_quadrature(kmax, g, 1),
    }
}

/// GELU moments by composite Gauss–Legendre. `resolution` multiplies the
/// panel count of every segment (1 is the default accuracy).
pub fn gelu_moments_quadrature(kmax: usize, g: ScalarGaussian, resolution: usize) -> Vec<f64> {
    let ScalarGaussian { mu, sigma } = g;
    let resolution = resolution.max(1);
    let half = QUADRATURE_HALF_WIDTH;
    // Φ(mu + sigma z) moves from ~0 to ~1 inside z0 ± 8.5/sigma.
    let z0 = -mu / sigma;
    let w = 8.5 / sigma;
    let fine = (2.0 / sigma).min(1.0);
    let mut cuts = vec![-half];
    for c in [z0 - w, z0 + w] {
        if c > *cuts.last().unwrap() && c < half {
            cuts.push(c);
        }
    }
    cuts.push(half);

    let mut out = vec![0.0; kmax + 1];
    for seg in cuts.windows(2) {
        let (lo, hi) = (seg[0], seg[1]);
        let inside = hi > z0 - w && lo < z0 + w;
        let step = if inside { fine } else { 1.0 };
        let panels = (((hi - lo) / step).ceil() as usize).max(1) * resolution;
        composite_legendre_vec(lo, hi, panels, &mut out, |z, wt, acc| {
            let x = mu + sigma * z;
            let mut term = wt * norm_pdf(z) * x * norm_cdf(x);
            for slot in acc.iter_mut() {
                *slot += term;
                term *= x;
            }
        });
    }
    out
}

/// `E[act(X)]` in closed form.
pub fn act_mean(act: Activation, g: ScalarGaussian) -> Result<f64> {
    let ScalarGaussian { mu, sigma } = ScalarGaussian::new(g.mu, g.sigma)?;
    if sigma == 0.0 {
        return Ok(act.apply(mu));
    }
    Ok(match act {
        Activation::Identity => mu,
        Activation::Relu => {
            let t = mu / sigma;
            mu * norm_cdf(t) + sigma * norm_pdf(t)
        }
        Activation::Gelu => {
            let s = (1.0 + sigma * sigma).sqrt();
            let t = mu / s;
            mu * norm_cdf(t) + sigma * sigma / s * norm_pdf(t)
        }
    })
}

/// `E[act'(X)]`, with a flag set when the ReLU subgradient convention applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivMean {
    pub value: f64,
    pub subgradient: bool,
}

pub fn act_deriv_mean(act: Activation, g: ScalarGaussian) -> Result<DerivMean> {
    let ScalarGaussian { mu, sigma } = ScalarGaussian::new(g.mu, g.sigma)?;
    let plain = |value| DerivMean { value, subgradient: false };
    if sigma == 0.0 {
        let subgradient = act == Activation::Relu && mu == 0.0;
        return Ok(DerivMean { value: act.derivative(mu), subgradient });
    }
    Ok(match act {
        Activation::Identity => plain(1.0),
        Activation::Relu => plain(norm_cdf(mu / sigma)),
        Activation::Gelu => {
            let s2 = 1.0 + sigma * sigma;
            let s = s2.sqrt();
            let t = mu / s;
            plain(norm_cdf(t) + norm_pdf(t) * (t - mu * sigma * sigma / (s2 * s)))
        }
    })
}
