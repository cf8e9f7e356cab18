//! Reduction of `E[g(X) ∏ Y_i]` over jointly Gaussian `(X, Y_1..Y_n)` to a
//! linear combination `Σ_k a_k E[g(X) X^k]` of univariate integrals.
//!
//! Each `Y_i` is split as `α_i + β_i X + ε_i` with `(α_i, β_i)` the OLS fit of
//! `Y_i` on `X`; the residuals are independent of `X`, so expanding the product
//! groups terms by the number of `β` factors, and the residual products reduce
//! to zero-mean Isserlis sums over the residual covariance.

use nalgebra::{DMatrix, DVector};

use crate::actint::{act_moments_unchecked, Activation, ScalarGaussian};
use crate::error::{Error, Result};
use crate::gauss::{central_product, noncentral_product, validated_covariance, MomentSpec};

/// Largest number of `Y` factors supported.
pub const MAX_MASTER_ORDER: usize = 6;
/// `var_x < DEGENERATE_VAR_RTOL·(1 + mean_x²)` takes the point-mass path.
pub const DEGENERATE_VAR_RTOL: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct JointScalarStats {
    pub mean_x: f64,
    pub var_x: f64,
    pub mean_y: Vec<f64>,
    pub cov_xy: Vec<f64>,
    pub cov_yy: DMatrix<f64>,
}

impl JointScalarStats {
    pub fn new(mean_x: f64, var_x: f64, mean_y: Vec<f64>, cov_xy: Vec<f64>, cov_yy: DMatrix<f64>) -> Result<Self> {
        let n = mean_y.len();
        if cov_xy.len() != n || cov_yy.shape() != (n, n) {
            return Err(Error::invalid(format!(
                "joint stats: {n} means, {} cross-covariances, {:?} covariance",
                cov_xy.len(),
                cov_yy.shape()
            )));
        }
        if !mean_x.is_finite() || !var_x.is_finite() || var_x < 0.0 || mean_y.iter().chain(&cov_xy).any(|v| !v.is_finite()) {
            return Err(Error::invalid("joint stats: entries must be finite with var_x >= 0"));
        }
        let stats = Self::new_unchecked(mean_x, var_x, mean_y, cov_xy, cov_yy);
        let full = validated_covariance(&stats.full_covariance(), "joint stats")?;
        Ok(Self { cov_yy: full.view((1, 1), (n, n)).into_owned(), ..stats })
    }

    pub(crate) fn new_unchecked(mean_x: f64, var_x: f64, mean_y: Vec<f64>, cov_xy: Vec<f64>, cov_yy: DMatrix<f64>) -> Self {
        Self { mean_x, var_x, mean_y, cov_xy, cov_yy }
    }

    pub fn n(&self) -> usize {
        self.mean_y.len()
    }

    pub fn is_degenerate(&self) -> bool {
        self.var_x < DEGENERATE_VAR_RTOL * (1.0 + self.mean_x * self.mean_x)
    }

    /// `(n+1)×(n+1)` covariance with `X` first.
    pub fn full_covariance(&self) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_fn(n + 1, n + 1, |r, c| match (r, c) {
            (0, 0) => self.var_x,
            (0, j) => self.cov_xy[j - 1],
            (i, 0) => self.cov_xy[i - 1],
            (i, j) => self.cov_yy[(i - 1, j - 1)],
        })
    }

    /// Moment spec over `(X, Y_1..Y_n)`, `X` first.
    pub fn moment_spec(&self) -> Result<MomentSpec> {
        let mut means = vec![self.mean_x];
        means.extend(&self.mean_y);
        MomentSpec::new(means, self.full_covariance())
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.n() {
            return Err(Error::invalid(format!("index {i} out of range for {} variables", self.n())));
        }
        Ok(())
    }

    fn require_variance(&self) -> Result<()> {
        if self.is_degenerate() {
            return Err(Error::DegenerateVariance { var: self.var_x });
        }
        Ok(())
    }
}

/// Coefficients `a_0..=a_n` of `Σ_k a_k E[g(X) X^k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MasterCoefficients {
    pub a: Vec<f64>,
}

/// `(α_i, β_i)` of the regression of `Y_i` on `X`.
pub fn ols_scalar(stats: &JointScalarStats, i: usize) -> Result<(f64, f64)> {
    stats.check_index(i)?;
    stats.require_variance()?;
    let beta = stats.cov_xy[i] / stats.var_x;
    Ok((stats.mean_y[i] - beta * stats.mean_x, beta))
}

/// `Cov(ε_i, ε_j) = Cov(Y_i, Y_j) − Cov(X, Y_i) Cov(X, Y_j) / Var(X)`.
pub fn residual_cov(stats: &JointScalarStats, i: usize, j: usize) -> Result<f64> {
    stats.check_index(i)?;
    stats.check_index(j)?;
    stats.require_variance()?;
    Ok(stats.cov_yy[(i, j)] - stats.cov_xy[i] * stats.cov_xy[j] / stats.var_x)
}

pub fn master_coefficients(stats: &JointScalarStats) -> Result<MasterCoefficients> {
    if stats.n() > MAX_MASTER_ORDER {
        return Err(Error::DegreeTooHigh { degree: stats.n(), max: MAX_MASTER_ORDER });
    }
    stats.require_variance()?;
    Ok(MasterCoefficients { a: coefficients_unchecked(stats) })
}

pub(crate) fn coefficients_unchecked(stats: &JointScalarStats) -> Vec<f64> {
    let n = stats.n();
    let beta: Vec<f64> = stats.cov_xy.iter().map(|c| c / stats.var_x).collect();
    let alpha: Vec<f64> = (0..n).map(|i| stats.mean_y[i] - beta[i] * stats.mean_x).collect();
    let resid = DMatrix::from_fn(n, n, |i, j| stats.cov_yy[(i, j)] - stats.cov_xy[i] * stats.cov_xy[j] / stats.var_x);

    let full: u32 = (1 << n) - 1;
    // E[∏_{i∈E} ε_i] for every residual subset E
    let eps_moment: Vec<f64> = (0..=full)
        .map(|mask| {
            let idx: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
            central_product(&idx, &resid)
        })
        .collect();
    let prod_over = |vals: &[f64], mask: u32| -> f64 { (0..n).filter(|i| mask >> i & 1 == 1).map(|i| vals[i]).product() };

    let mut a = vec![0.0; n + 1];
    for b_mask in 0..=full {
        let k = b_mask.count_ones() as usize;
        let rest = full & !b_mask;
        // sum over α/ε choices for the positions not taken by β
        let mut inner = 0.0;
        let mut e_mask = rest;
        loop {
            let m = eps_moment[e_mask as usize];
            if m != 0.0 {
                inner += prod_over(&alpha, rest & !e_mask) * m;
            }
            if e_mask == 0 {
                break;
            }
            e_mask = (e_mask - 1) & rest;
        }
        a[k] += prod_over(&beta, b_mask) * inner;
    }
    a
}

/// `E[act(X) ∏ Y_i]`.
pub fn master_expectation(stats: &JointScalarStats, act: Activation) -> Result<f64> {
    let n = stats.n();
    if n > MAX_MASTER_ORDER {
        return Err(Error::DegreeTooHigh { degree: n, max: MAX_MASTER_ORDER });
    }
    let g = ScalarGaussian::from_variance(stats.mean_x, stats.var_x)?;
    let moments = if stats.is_degenerate() { Vec::new() } else { act_moments_unchecked(act, n, g) };
    Ok(expectation_from_moments(stats, act, &moments))
}

/// Same as [`master_expectation`] given precomputed `E[act(X) X^k]`, `k = 0..=n`
/// (ignored on the degenerate path).
pub(crate) fn expectation_from_moments(stats: &JointScalarStats, act: Activation, moments: &[f64]) -> f64 {
    if stats.is_degenerate() {
        let idx: Vec<usize> = (0..stats.n()).collect();
        return act.apply(stats.mean_x) * noncentral_product(&idx, &stats.mean_y, &stats.cov_yy);
    }
    coefficients_unchecked(stats).iter().zip(moments).map(|(a, m)| a * m).sum()
}

/// Builds stats for `X = v_xᵀ ξ + c_x`, `Y_i = v_iᵀ ξ + c_i` with `ξ ~ N(μ, Σ)`.
pub fn stats_from_linear_forms(
    x_form: (&DVector<f64>, f64),
    y_forms: &[(DVector<f64>, f64)],
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> JointScalarStats {
    let sx = cov * x_form.0;
    let sy: Vec<DVector<f64>> = y_forms.iter().map(|(v, _)| cov * v).collect();
    let n = y_forms.len();
    JointScalarStats::new_unchecked(
        x_form.0.dot(mean) + x_form.1,
        x_form.0.dot(&sx),
        y_forms.iter().map(|(v, c)| v.dot(mean) + c).collect(),
        sy.iter().map(|s| s.dot(x_form.0)).collect(),
        DMatrix::from_fn(n, n, |i, j| y_forms[i].0.dot(&sy[j])),
    )
}
