//! Linear and quadratic least-squares approximants of single-hidden-layer
//! networks under Gaussian and Gaussian-mixture inputs.
//!
//! Every fit is an OLS solve `Cov[z] B = Cov[z, f]` over a feature vector `z`
//! (`x` for linear fits, `x` followed by the degree-2 monomials for quadratic
//! ones). Per mixture component the required moments are Gaussian integrals
//! handled by [`crate::actint`] and [`crate::master`]; components are combined
//! with the law of total covariance.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::actint::{act_deriv_mean, act_moments_unchecked, Activation, ScalarGaussian};
use crate::error::{Error, Result};
use crate::gauss::{
    noncentral_product, total_covariance_unchecked, Gaussian, GaussianComponents, GaussianMixture, Sampler,
};
use crate::master::{expectation_from_moments, JointScalarStats};
use crate::par;

/// `f(x) = w2·act(w1·x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub act: Activation,
}

impl MlpSpec {
    pub fn new(w1: DMatrix<f64>, b1: DVector<f64>, w2: DMatrix<f64>, b2: DVector<f64>, act: Activation) -> Result<Self> {
        let net = Self { w1, b1, w2, b2, act };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.w1.nrows();
        if self.b1.len() != h || self.w2.ncols() != h || self.b2.len() != self.w2.nrows() {
            return Err(Error::invalid(format!(
                "mlp shapes inconsistent: w1 {:?}, b1 {}, w2 {:?}, b2 {}",
                self.w1.shape(),
                self.b1.len(),
                self.w2.shape(),
                self.b2.len()
            )));
        }
        let finite = self.w1.iter().chain(self.b1.iter()).chain(self.w2.iter()).chain(self.b2.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("mlp has non-finite weights"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.nrows()
    }

    /// Row-wise forward pass: `x` is `n × d`, result `n × o`.
    pub fn forward_rows(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut pre = x * self.w1.transpose();
        for mut row in pre.row_iter_mut() {
            for (v, b) in row.iter_mut().zip(self.b1.iter()) {
                *v = self.act.apply(*v + b);
            }
        }
        add_row_bias(pre * self.w2.transpose(), &self.b2)
    }
}

/// `GLU(x) = act(w·x + b) ⊙ (v·x + c)`, optionally followed by `out` (`o × h`).
#[derive(Debug, Clone, PartialEq)]
pub struct GluSpec {
    pub w: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: DVector<f64>,
    pub out: Option<DMatrix<f64>>,
    pub act: Activation,
}

impl GluSpec {
    pub fn new(
        w: DMatrix<f64>,
        v: DMatrix<f64>,
        b: DVector<f64>,
        c: DVector<f64>,
        out: Option<DMatrix<f64>>,
        act: Activation,
    ) -> Result<Self> {
        let net = Self { w, v, b, c, out, act };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.w.nrows();
        let ok = self.v.shape() == self.w.shape()
            && self.b.len() == h
            && self.c.len() == h
            && self.out.as_ref().is_none_or(|o| o.ncols() == h);
        if !ok {
            return Err(Error::invalid(format!(
                "glu shapes inconsistent: w {:?}, v {:?}, b {}, c {}, out {:?}",
                self.w.shape(),
                self.v.shape(),
                self.b.len(),
                self.c.len(),
                self.out.as_ref().map(|o| o.shape())
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.out.as_ref().map_or(self.hidden_dim(), |o| o.nrows())
    }

    pub fn forward_rows(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let gate = x * self.w.transpose();
        let value = x * self.v.transpose();
        let h = DMatrix::from_fn(x.nrows(), self.hidden_dim(), |r, i| {
            self.act.apply(gate[(r, i)] + self.b[i]) * (value[(r, i)] + self.c[i])
        });
        match &self.out {
            Some(o) => h * o.transpose(),
            None => h,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    Mlp(MlpSpec),
    Glu(GluSpec),
}

impl Network {
    pub fn input_dim(&self) -> usize {
        match self {
            Network::Mlp(n) => n.input_dim(),
            Network::Glu(n) => n.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Network::Mlp(n) => n.output_dim(),
            Network::Glu(n) => n.output_dim(),
        }
    }

    pub fn forward_rows(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Network::Mlp(n) => n.forward_rows(x),
            Network::Glu(n) => n.forward_rows(x),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Network::Mlp(n) => n.validate(),
            Network::Glu(n) => n.validate(),
        }
    }
}

impl From<MlpSpec> for Network {
    fn from(n: MlpSpec) -> Self {
        Network::Mlp(n)
    }
}

impl From<GluSpec> for Network {
    fn from(n: GluSpec) -> Self {
        Network::Glu(n)
    }
}

fn add_row_bias(mut m: DMatrix<f64>, bias: &DVector<f64>) -> DMatrix<f64> {
    for mut row in m.row_iter_mut() {
        for (v, b) in row.iter_mut().zip(bias.iter()) {
            *v += b;
        }
    }
    m
}

/// `g(x) = betaᵀx + alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearApproximant {
    pub alpha: DVector<f64>,
    /// `d × o`
    pub beta: DMatrix<f64>,
    /// Relative ridge jitter used in the final solve.
    pub ridge: f64,
}

impl LinearApproximant {
    pub fn predict_rows(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        add_row_bias(x * &self.beta, &self.alpha)
    }
}

/// `g_k(x) = xᵀ q_k x + beta[:, k]ᵀ x + gamma_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticApproximant {
    pub gamma: DVector<f64>,
    /// `d × o`
    pub beta: DMatrix<f64>,
    /// One symmetric `d × d` matrix per output.
    pub q: Vec<DMatrix<f64>>,
    pub ridge: f64,
}

impl QuadraticApproximant {
    pub fn zeros(d: usize, o: usize) -> Self {
        Self { gamma: DVector::zeros(o), beta: DMatrix::zeros(d, o), q: vec![DMatrix::zeros(d, d); o], ridge: 0.0 }
    }

    pub fn input_dim(&self) -> usize {
        self.beta.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn predict_rows(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = add_row_bias(x * &self.beta, &self.gamma);
        for (k, q) in self.q.iter().enumerate() {
            let xq = x * q;
            for r in 0..x.nrows() {
                out[(r, k)] += xq.row(r).dot(&x.row(r));
            }
        }
        out
    }

    /// Coefficients on the canonical `z` features for output `k`.
    pub fn z_coefficients(&self, k: usize) -> DVector<f64> {
        let d = self.input_dim();
        let pairs = feature_pairs(d);
        let mut c = DVector::zeros(d + pairs.len());
        c.rows_mut(0, d).copy_from(&self.beta.column(k));
        for (p, &(i, j)) in pairs.iter().enumerate() {
            c[d + p] = if i == j { self.q[k][(i, i)] } else { 2.0 * self.q[k][(i, j)] };
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Approximant {
    Linear(LinearApproximant),
    Quadratic(QuadraticApproximant),
}

impl Approximant {
    pub fn predict_rows(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Approximant::Linear(a) => a.predict_rows(x),
            Approximant::Quadratic(a) => a.predict_rows(x),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Approximant::Linear(a) => a.beta.nrows(),
            Approximant::Quadratic(a) => a.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Approximant::Linear(a) => a.alpha.len(),
            Approximant::Quadratic(a) => a.output_dim(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Approximant::Linear(_) => "linear",
            Approximant::Quadratic(_) => "quadratic",
        }
    }
}

/// Upper-triangle monomial index pairs `(i, j)`, `i ≤ j`, in lexicographic order.
pub fn feature_pairs(d: usize) -> Vec<(usize, usize)> {
    (0..d).flat_map(|i| (i..d).map(move |j| (i, j))).collect()
}

/// `D = d + d(d+1)/2`.
pub fn z_dim(d: usize) -> usize {
    d + d * (d + 1) / 2
}

/// Limits for the closed-form fits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApproxConfig {
    /// Largest `D` for which `Cov[z]` is materialized.
    pub max_feature_dim: usize,
    /// Largest `d` for the closed-form quadratic under a multi-component mixture.
    pub mixture_quadratic_max_d: usize,
}

impl Default for ApproxConfig {
    fn default() -> Self {
        Self { max_feature_dim: 20_000, mixture_quadratic_max_d: 32 }
    }
}

/// Mean and covariance of the canonical `z` features.
#[derive(Debug, Clone, PartialEq)]
pub struct ZMoments {
    pub mean_z: DVector<f64>,
    pub cov_z: DMatrix<f64>,
}

pub fn z_moments(input: &Gaussian) -> Result<ZMoments> {
    z_moments_with(input, &ApproxConfig::default())
}

pub fn z_moments_with(input: &Gaussian, cfg: &ApproxConfig) -> Result<ZMoments> {
    let d = input.dim();
    let dz = z_dim(d);
    if dz > cfg.max_feature_dim {
        return Err(Error::Budget { dim: dz, limit: cfg.max_feature_dim });
    }
    let mu = input.mean().as_slice();
    let sigma = input.cov();
    // each z coordinate as the list of x indices it multiplies
    let mut monos: Vec<Vec<usize>> = (0..d).map(|i| vec![i]).collect();
    monos.extend(feature_pairs(d).into_iter().map(|(i, j)| vec![i, j]));
    let mean_z = DVector::from_iterator(dz, monos.iter().map(|m| noncentral_product(m, mu, sigma)));
    let rows = par::map_indexed(dz, |a| {
        (a..dz)
            .map(|b| {
                let idx: Vec<usize> = monos[a].iter().chain(&monos[b]).copied().collect();
                noncentral_product(&idx, mu, sigma) - mean_z[a] * mean_z[b]
            })
            .collect::<Vec<f64>>()
    });
    let mut cov_z = DMatrix::zeros(dz, dz);
    for (a, row) in rows.into_iter().enumerate() {
        for (off, v) in row.into_iter().enumerate() {
            cov_z[(a, a + off)] = v;
            cov_z[(a + off, a)] = v;
        }
    }
    Ok(ZMoments { mean_z, cov_z })
}

/// `Cov[z]` under exactly `N(0, I)`: diagonal, 1 on `x_i` and `x_i x_j (i<j)`,
/// 2 on `x_i²`. Nothing `D × D` is materialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StandardZDiagonal {
    pub d: usize,
}

pub fn cov_z_standard_fast(d: usize) -> StandardZDiagonal {
    StandardZDiagonal { d }
}

impl StandardZDiagonal {
    pub fn len(&self) -> usize {
        z_dim(self.d)
    }

    pub fn is_empty(&self) -> bool {
        self.d == 0
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut diag = vec![1.0; self.d];
        diag.extend(feature_pairs(self.d).into_iter().map(|(i, j)| if i == j { 2.0 } else { 1.0 }));
        diag
    }

    /// `E[z]` under `N(0, I)`.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.d];
        m.extend(feature_pairs(self.d).into_iter().map(|(i, j)| if i == j { 1.0 } else { 0.0 }));
        m
    }

    /// Solves `Cov[z] B = rhs` by elementwise division.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let diag = self.diagonal();
        DMatrix::from_fn(rhs.nrows(), rhs.ncols(), |r, c| rhs[(r, c)] / diag[r])
    }
}

/// Statistics of one block of preactivations `A x + a` under `N(μ, Σ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Preactivation {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// `Cov(pre, x) = A Σ`
    pub cross_x: DMatrix<f64>,
}

fn preactivation(a: &DMatrix<f64>, shift: &DVector<f64>, input: &Gaussian) -> Preactivation {
    let cross_x = a * input.cov();
    Preactivation { mean: a * input.mean() + shift, cov: &cross_x * a.transpose(), cross_x }
}

/// Joint statistics of the hidden-layer preactivations. MLPs fill only `gate`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreactivationStats {
    pub gate: Preactivation,
    pub value: Option<Preactivation>,
    /// `Cov(gate, value) = W Σ Vᵀ` (GLU only)
    pub gate_value_cov: Option<DMatrix<f64>>,
}

pub fn preactivation_gaussians(net: &Network, input: &Gaussian) -> Result<PreactivationStats> {
    check_dims(net, input.dim())?;
    Ok(match net {
        Network::Mlp(m) => PreactivationStats { gate: preactivation(&m.w1, &m.b1, input), value: None, gate_value_cov: None },
        Network::Glu(g) => {
            let gate = preactivation(&g.w, &g.b, input);
            let value = preactivation(&g.v, &g.c, input);
            let cross = &gate.cross_x * g.v.transpose();
            PreactivationStats { gate, value: Some(value), gate_value_cov: Some(cross) }
        }
    })
}

fn check_dims(net: &Network, d: usize) -> Result<()> {
    net.validate()?;
    if net.input_dim() != d {
        return Err(Error::invalid(format!("network expects d = {} but input has d = {d}", net.input_dim())));
    }
    Ok(())
}

/// One hidden unit `h = act(y)·u?` seen through its joint Gaussian statistics
/// with the centered inputs `ξ = x − μ`.
struct Unit {
    act: Activation,
    mean_y: f64,
    var_y: f64,
    cov_y_xi: DVector<f64>,
    value: Option<ValueFactor>,
    /// `E[act(y) y^k]`, `k = 0..=max order`
    moments: Vec<f64>,
}

struct ValueFactor {
    mean: f64,
    var: f64,
    cov_y: f64,
    cov_xi: DVector<f64>,
}

impl Unit {
    /// `E[h · ∏_{a ∈ xi} ξ_a]`.
    fn expectation(&self, xi: &[usize], sigma: &DMatrix<f64>) -> f64 {
        let extra = usize::from(self.value.is_some());
        let n = xi.len() + extra;
        let mut mean_y = vec![0.0; n];
        let mut cov_xy = vec![0.0; n];
        let mut cov_yy = DMatrix::zeros(n, n);
        if let Some(v) = &self.value {
            mean_y[0] = v.mean;
            cov_xy[0] = v.cov_y;
            cov_yy[(0, 0)] = v.var;
            for (p, &a) in xi.iter().enumerate() {
                cov_yy[(0, p + 1)] = v.cov_xi[a];
                cov_yy[(p + 1, 0)] = v.cov_xi[a];
            }
        }
        for (p, &a) in xi.iter().enumerate() {
            cov_xy[p + extra] = self.cov_y_xi[a];
            for (r, &b) in xi.iter().enumerate() {
                cov_yy[(p + extra, r + extra)] = sigma[(a, b)];
            }
        }
        let stats = JointScalarStats::new_unchecked(self.mean_y, self.var_y, mean_y, cov_xy, cov_yy);
        expectation_from_moments(&stats, self.act, &self.moments)
    }
}

/// Per-component moments of the hidden units against the input features.
struct HiddenMoments {
    /// `E[h]`
    mean: DVector<f64>,
    /// `Cov(h, x)`, `h × d`
    cov_x: DMatrix<f64>,
    /// `Cov(h, x_k x_l)` over [`feature_pairs`], `h × P`
    cov_pairs: Option<DMatrix<f64>>,
}

fn hidden_moments(net: &Network, g: &Gaussian, quadratic: bool) -> Result<HiddenMoments> {
    let pre = preactivation_gaussians(net, g)?;
    let d = g.dim();
    let sigma = g.cov();
    let mu = g.mean();
    let (act, h) = match net {
        Network::Mlp(m) => (m.act, m.hidden_dim()),
        Network::Glu(n) => (n.act, n.hidden_dim()),
    };
    let is_glu = pre.value.is_some();
    let order = usize::from(is_glu) + if quadratic { 2 } else { 1 };
    let pairs = feature_pairs(d);

    let rows = par::map_indexed(h, |i| {
        let var_y = pre.gate.cov[(i, i)].max(0.0);
        let gs = ScalarGaussian { mu: pre.gate.mean[i], sigma: var_y.sqrt() };
        let unit = Unit {
            act,
            mean_y: pre.gate.mean[i],
            var_y,
            cov_y_xi: pre.gate.cross_x.row(i).transpose(),
            value: pre.value.as_ref().map(|v| ValueFactor {
                mean: v.mean[i],
                var: v.cov[(i, i)].max(0.0),
                cov_y: pre.gate_value_cov.as_ref().unwrap()[(i, i)],
                cov_xi: v.cross_x.row(i).transpose(),
            }),
            moments: act_moments_unchecked(act, order, gs),
        };
        let mean = if is_glu { unit.expectation(&[], sigma) } else { unit.moments[0] };
        let cov_x: Vec<f64> = if is_glu {
            (0..d).map(|a| unit.expectation(&[a], sigma)).collect()
        } else {
            // Stein: Cov(act(y), x) = Cov(y, x)·E[act'(y)]
            let slope = act_deriv_mean(act, gs).map(|m| m.value).unwrap_or(0.0);
            (0..d).map(|a| pre.gate.cross_x[(i, a)] * slope).collect()
        };
        let cov_pairs: Option<Vec<f64>> = quadratic.then(|| {
            pairs
                .iter()
                .map(|&(k, l)| {
                    // x_k x_l = μ_k μ_l + μ_k ξ_l + μ_l ξ_k + ξ_k ξ_l
                    let centered = unit.expectation(&[k, l], sigma) - mean * sigma[(k, l)];
                    mu[k] * cov_x[l] + mu[l] * cov_x[k] + centered
                })
                .collect()
        });
        (mean, cov_x, cov_pairs)
    });

    let mut out = HiddenMoments {
        mean: DVector::zeros(h),
        cov_x: DMatrix::zeros(h, d),
        cov_pairs: quadratic.then(|| DMatrix::zeros(h, pairs.len())),
    };
    for (i, (mean, cov_x, cov_pairs)) in rows.into_iter().enumerate() {
        out.mean[i] = mean;
        out.cov_x.row_mut(i).copy_from_slice(&cov_x);
        if let (Some(dst), Some(src)) = (out.cov_pairs.as_mut(), cov_pairs) {
            dst.row_mut(i).copy_from_slice(&src);
        }
    }
    Ok(out)
}

/// Output map `f = O·h + b` of the network.
fn output_map(net: &Network) -> (DMatrix<f64>, DVector<f64>) {
    match net {
        Network::Mlp(m) => (m.w2.clone(), m.b2.clone()),
        Network::Glu(g) => {
            let h = g.hidden_dim();
            let o = g.out.clone().unwrap_or_else(|| DMatrix::identity(h, h));
            let zeros = DVector::zeros(o.nrows());
            (o, zeros)
        }
    }
}

/// Relative ridge schedule `1e-9, 1e-8, …, 1e-3`.
pub const RIDGE_START: f64 = 1e-9;
pub const RIDGE_MAX: f64 = 1e-3;
/// Condition estimate above which a factorization counts as failed.
pub const CONDITION_LIMIT: f64 = 1e13;

/// Solves `(A + λ·mean(diag A)·I) X = rhs`, escalating `λ` on failure.
pub fn ridge_solve(cov: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let n = cov.nrows();
    let sym = (cov + cov.transpose()) * 0.5;
    let mean_diag = if n == 0 { 1.0 } else { sym.trace() / n as f64 };
    let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let mut ridge = RIDGE_START;
    let mut condition = f64::INFINITY;
    while ridge <= RIDGE_MAX * (1.0 + 1e-9) {
        let mut a = sym.clone();
        for i in 0..n {
            a[(i, i)] += ridge * scale;
        }
        if let Some(chol) = Cholesky::new(a) {
            let diag = chol.l_dirty().diagonal();
            let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
            condition = (hi / lo).powi(2);
            if condition.is_finite() && condition < CONDITION_LIMIT {
                return Ok((chol.solve(rhs), ridge));
            }
        }
        ridge *= 10.0;
    }
    Err(Error::IllConditioned { condition, ridge: RIDGE_MAX })
}

/// Per-component first and second moments of `(features, f)`, combined by
/// the law of total covariance and solved.
struct FitMoments {
    mean_feat: Vec<DVector<f64>>,
    cov_feat: Vec<DMatrix<f64>>,
    mean_f: Vec<DVector<f64>>,
    /// `Cov(features, f)` per component
    cross: Vec<DMatrix<f64>>,
}

impl FitMoments {
    fn with_capacity(m: usize) -> Self {
        Self {
            mean_feat: Vec::with_capacity(m),
            cov_feat: Vec::with_capacity(m),
            mean_f: Vec::with_capacity(m),
            cross: Vec::with_capacity(m),
        }
    }

    fn totals(&self, weights: &[f64]) -> (DVector<f64>, DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
        let wmean = |vs: &[DVector<f64>]| vs.iter().zip(weights).fold(DVector::zeros(vs[0].len()), |acc, (v, w)| acc + v * *w);
        let cov = total_covariance_unchecked(&self.mean_feat, &self.mean_feat, &self.cov_feat, weights);
        let cross = total_covariance_unchecked(&self.mean_feat, &self.mean_f, &self.cross, weights);
        (wmean(&self.mean_feat), cov, wmean(&self.mean_f), cross)
    }
}

pub fn linear_approx_mlp<D: GaussianComponents + ?Sized>(net: &MlpSpec, input: &D) -> Result<LinearApproximant> {
    linear_approx(&Network::Mlp(net.clone()), input)
}

pub fn linear_approx_glu<D: GaussianComponents + ?Sized>(net: &GluSpec, input: &D) -> Result<LinearApproximant> {
    linear_approx(&Network::Glu(net.clone()), input)
}

/// Least-squares affine approximant `β = Cov[x]⁻¹ Cov[x, f]`, `α = E[f] − βᵀE[x]`.
pub fn linear_approx<D: GaussianComponents + ?Sized>(net: &Network, input: &D) -> Result<LinearApproximant> {
    check_dims(net, input.dim())?;
    let (out, bias) = output_map(net);
    let comps = input.weighted();
    let weights: Vec<f64> = comps.iter().map(|(w, _)| *w).collect();
    let mut fm = FitMoments::with_capacity(comps.len());
    for (_, g) in &comps {
        let hm = hidden_moments(net, g, false)?;
        fm.mean_feat.push(g.mean().clone());
        fm.cov_feat.push(g.cov().clone());
        fm.mean_f.push(&out * &hm.mean + &bias);
        fm.cross.push((&out * &hm.cov_x).transpose());
    }
    let (mean_x, cov_x, mean_f, cross) = fm.totals(&weights);
    let (beta, ridge) = ridge_solve(&cov_x, &cross)?;
    let alpha = mean_f - beta.transpose() * mean_x;
    Ok(LinearApproximant { alpha, beta, ridge })
}

pub fn quadratic_approx_mlp<D: GaussianComponents + ?Sized>(net: &MlpSpec, input: &D) -> Result<QuadraticApproximant> {
    quadratic_approx(&Network::Mlp(net.clone()), input, &ApproxConfig::default())
}

pub fn quadratic_approx_glu<D: GaussianComponents + ?Sized>(net: &GluSpec, input: &D) -> Result<QuadraticApproximant> {
    quadratic_approx(&Network::Glu(net.clone()), input, &ApproxConfig::default())
}

/// Least-squares quadratic approximant: OLS on `z = (x, x_i x_j)`.
pub fn quadratic_approx<D: GaussianComponents + ?Sized>(
    net: &Network,
    input: &D,
    cfg: &ApproxConfig,
) -> Result<QuadraticApproximant> {
    let d = input.dim();
    check_dims(net, d)?;
    let dz = z_dim(d);
    if dz > cfg.max_feature_dim {
        return Err(Error::Budget { dim: dz, limit: cfg.max_feature_dim });
    }
    let comps = input.weighted();
    if comps.len() > 1 && d > cfg.mixture_quadratic_max_d {
        return Err(Error::UseRefine { d, limit: cfg.mixture_quadratic_max_d });
    }
    let (out, bias) = output_map(net);
    let weights: Vec<f64> = comps.iter().map(|(w, _)| *w).collect();

    let mut fm = FitMoments::with_capacity(comps.len());
    for (_, g) in &comps {
        let hm = hidden_moments(net, g, true)?;
        let mut cov_hz = DMatrix::zeros(hm.mean.len(), dz);
        cov_hz.columns_mut(0, d).copy_from(&hm.cov_x);
        cov_hz.columns_mut(d, dz - d).copy_from(hm.cov_pairs.as_ref().unwrap());
        fm.mean_f.push(&out * &hm.mean + &bias);
        fm.cross.push((&out * cov_hz).transpose());
        if comps.len() == 1 && g.is_standard() {
            // diagonal Cov[z]: no D×D storage
            let fast = cov_z_standard_fast(d);
            let coef = fast.solve(&fm.cross[0]);
            let mean_z = DVector::from_vec(fast.mean());
            let gamma = &fm.mean_f[0] - coef.transpose() * mean_z;
            return Ok(repack_quadratic(d, &coef, gamma, 0.0));
        }
        let zm = z_moments_with(g, cfg)?;
        fm.mean_feat.push(zm.mean_z);
        fm.cov_feat.push(zm.cov_z);
    }
    let (mean_z, cov_z, mean_f, cross) = fm.totals(&weights);
    let (coef, ridge) = ridge_solve(&cov_z, &cross)?;
    let gamma = mean_f - coef.transpose() * mean_z;
    Ok(repack_quadratic(d, &coef, gamma, ridge))
}

/// `coef` is `D × o` on canonical z order.
fn repack_quadratic(d: usize, coef: &DMatrix<f64>, gamma: DVector<f64>, ridge: f64) -> QuadraticApproximant {
    let o = coef.ncols();
    let beta = coef.rows(0, d).into_owned();
    let pairs = feature_pairs(d);
    let q = (0..o)
        .map(|k| {
            let mut q = DMatrix::zeros(d, d);
            for (p, &(i, j)) in pairs.iter().enumerate() {
                let c = coef[(d + p, k)];
                if i == j {
                    q[(i, i)] = c;
                } else {
                    q[(i, j)] = 0.5 * c;
                    q[(j, i)] = 0.5 * c;
                }
            }
            q
        })
        .collect();
    QuadraticApproximant { gamma, beta, q, ridge }
}

/// Settings for [`refine_quadratic`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub step_size: f64,
    /// Held-out sample size for the final FVU comparison.
    pub holdout: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { steps: 20_000, batch: 256, seed: 0, step_size: 1e-3, holdout: 20_000 }
    }
}

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: usize = 100;

/// Minibatch least-squares refinement of a quadratic approximant on samples
/// from `input`, averaging iterates over the second half of the run.
///
/// The objective is convex in the coefficients. If the refined coefficients
/// do worse than `init` on a held-out sample (by more than 1e-3 FVU), `init`
/// is returned unchanged.
pub fn refine_quadratic(
    init: &QuadraticApproximant,
    net: &Network,
    input: &GaussianMixture,
    cfg: &RefineConfig,
) -> Result<QuadraticApproximant> {
    let d = input.dim();
    check_dims(net, d)?;
    if init.input_dim() != d || init.output_dim() != net.output_dim() || init.q.len() != init.output_dim() {
        return Err(Error::invalid("refine: initial approximant shape does not match the network"));
    }
    if cfg.batch == 0 || !(cfg.step_size > 0.0) {
        return Err(Error::invalid("refine: batch must be positive and step size > 0"));
    }
    let sampler = Sampler::new(input);
    let o = init.output_dim();
    let mut cur = init.clone();
    let mut avg = QuadraticApproximant::zeros(d, o);
    let mut averaged = 0usize;
    let burn_in = cfg.steps / 2;
    let (mut rows, mut labels) = (Vec::new(), Vec::new());
    let mut initial_loss = None;
    let mut over = 0usize;
    let lr = cfg.step_size;

    for step in 0..cfg.steps {
        sampler.fill_chunk(cfg.seed, step as u64, cfg.batch, &mut rows, &mut labels);
        let x = DMatrix::from_row_slice(cfg.batch, d, &rows);
        let resid = cur.predict_rows(&x) - net.forward_rows(&x);
        let loss = resid.norm_squared() / cfg.batch as f64;
        let base = *initial_loss.get_or_insert(loss);
        if !loss.is_finite() {
            return Err(Error::StepSize { step, step_size: lr });
        }
        over = if loss > DIVERGENCE_FACTOR * base { over + 1 } else { 0 };
        if over >= DIVERGENCE_PATIENCE {
            return Err(Error::StepSize { step, step_size: lr });
        }
        // gradient of mean ‖g − f‖²
        let scale = 2.0 / cfg.batch as f64;
        let g_gamma = resid.row_sum().transpose() * scale;
        let g_beta = x.transpose() * &resid * scale;
        for k in 0..o {
            let mut weighted = x.clone();
            for (r, mut row) in weighted.row_iter_mut().enumerate() {
                row *= resid[(r, k)];
            }
            let g_q = x.transpose() * weighted * scale;
            cur.q[k] -= g_q * lr;
        }
        cur.gamma -= g_gamma * lr;
        cur.beta -= g_beta * lr;

        if step >= burn_in {
            averaged += 1;
            let t = 1.0 / averaged as f64;
            avg.gamma += (&cur.gamma - &avg.gamma) * t;
            avg.beta += (&cur.beta - &avg.beta) * t;
            for k in 0..o {
                let delta = (&cur.q[k] - &avg.q[k]) * t;
                avg.q[k] += delta;
            }
        }
    }
    if averaged == 0 {
        return Ok(init.clone());
    }
    for q in avg.q.iter_mut() {
        let sym = (&*q + q.transpose()) * 0.5;
        *q = sym;
    }
    avg.ridge = init.ridge;

    let holdout_seed = cfg.seed ^ 0x9e37_79b9_7f4a_7c15;
    let (xh, _) = sampler.draw(cfg.holdout.max(1000), holdout_seed);
    let fh = net.forward_rows(&xh);
    let fvu = |a: &QuadraticApproximant| crate::analysis::fvu_of(&fh, &a.predict_rows(&xh));
    match (fvu(init), fvu(&avg)) {
        (Ok(before), Ok(after)) if after > before + 1e-3 => Ok(init.clone()),
        _ => Ok(avg),
    }
}
