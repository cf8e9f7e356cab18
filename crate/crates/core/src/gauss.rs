//! Gaussian and Gaussian-mixture inputs, noncentral Isserlis moments, and
//! the law-of-total-covariance composition used to lift single-Gaussian
//! formulas to mixtures.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::par;

/// Relative asymmetry tolerated in a covariance before it is rejected.
pub const SYMMETRY_RTOL: f64 = 1e-12;
/// Smallest eigenvalue allowed, relative to the Frobenius norm.
pub const PSD_TOL: f64 = 1e-10;
/// Largest product order accepted by the partition enumerators.
pub const MAX_ISSERLIS_ORDER: usize = 8;
/// Rows generated per RNG stream when sampling.
pub const SAMPLE_CHUNK: usize = 4096;
/// Tolerance on the weight simplex.
pub const WEIGHT_TOL: f64 = 1e-12;

/// Checks symmetry and positive semidefiniteness; returns `(A + Aᵀ)/2`.
pub(crate) fn validated_covariance(cov: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if !cov.is_square() {
        return Err(Error::invalid(format!(
            "{what}: covariance is {}x{}, expected square",
            cov.nrows(),
            cov.ncols()
        )));
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what}: covariance has non-finite entries")));
    }
    let scale = cov.amax();
    let asym = (cov - cov.transpose()).amax();
    if asym > SYMMETRY_RTOL * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::invalid(format!(
            "{what}: covariance asymmetric (max |A - Aᵀ| = {asym:e})"
        )));
    }
    let sym = (cov + cov.transpose()) * 0.5;
    if sym.nrows() > 0 {
        let min_eig = sym.clone().symmetric_eigenvalues().min();
        if min_eig < -PSD_TOL * sym.norm() {
            return Err(Error::invalid(format!(
                "{what}: covariance not positive semidefinite (min eigenvalue {min_eig:e})"
            )));
        }
    }
    Ok(sym)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() {
            return Err(Error::invalid(format!(
                "mean has length {} but covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("mean has non-finite entries"));
        }
        let cov = validated_covariance(&cov, "gaussian")?;
        Ok(Self { mean, cov })
    }

    pub fn standard(d: usize) -> Self {
        Self { mean: DVector::zeros(d), cov: DMatrix::identity(d, d) }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// True when this is exactly `N(0, I)`.
    pub fn is_standard(&self) -> bool {
        self.mean.iter().all(|&m| m == 0.0)
            && self.cov.iter().enumerate().all(|(idx, &v)| {
                let (r, c) = (idx % self.dim(), idx / self.dim());
                v == if r == c { 1.0 } else { 0.0 }
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    components: Vec<Gaussian>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, components: Vec<Gaussian>) -> Result<Self> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(Error::invalid(format!(
                "mixture needs matching nonempty weights/components (got {} and {})",
                weights.len(),
                components.len()
            )));
        }
        check_simplex(&weights)?;
        let d = components[0].dim();
        if components.iter().any(|c| c.dim() != d) {
            return Err(Error::invalid("mixture components differ in dimension"));
        }
        Ok(Self { weights, components })
    }

    /// Builds a mixture after rescaling nonnegative weights to sum to one.
    pub fn normalized(weights: Vec<f64>, components: Vec<Gaussian>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::invalid("mixture weights must be nonnegative with positive sum"));
        }
        Self::new(weights.iter().map(|w| w / total).collect(), components)
    }

    pub fn single(g: Gaussian) -> Self {
        Self { weights: vec![1.0], components: vec![g] }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[Gaussian] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    /// Overall mean and covariance (law of total covariance with `Y = X`).
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let means: Vec<DVector<f64>> = self.components.iter().map(|c| c.mean.clone()).collect();
        let covs: Vec<DMatrix<f64>> = self.components.iter().map(|c| c.cov.clone()).collect();
        let cov = total_covariance_unchecked(&means, &means, &covs, &self.weights);
        (weighted_mean(&means, &self.weights), cov)
    }
}

fn check_simplex(weights: &[f64]) -> Result<()> {
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::invalid("mixture weights must be finite and nonnegative"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > WEIGHT_TOL {
        return Err(Error::invalid(format!("mixture weights sum to {total}, expected 1")));
    }
    Ok(())
}

/// Anything that can be viewed as a weighted list of Gaussian components.
pub trait GaussianComponents: Sync {
    fn dim(&self) -> usize;
    fn weighted(&self) -> Vec<(f64, &Gaussian)>;
}

impl GaussianComponents for Gaussian {
    fn dim(&self) -> usize {
        Gaussian::dim(self)
    }
    fn weighted(&self) -> Vec<(f64, &Gaussian)> {
        vec![(1.0, self)]
    }
}

impl GaussianComponents for GaussianMixture {
    fn dim(&self) -> usize {
        GaussianMixture::dim(self)
    }
    fn weighted(&self) -> Vec<(f64, &Gaussian)> {
        self.weights.iter().copied().zip(&self.components).collect()
    }
}

/// Either input family, for APIs that accept both.
#[derive(Debug, Clone, PartialEq)]
pub enum InputDistribution {
    Gaussian(Gaussian),
    Mixture(GaussianMixture),
}

impl InputDistribution {
    pub fn into_mixture(self) -> GaussianMixture {
        match self {
            InputDistribution::Gaussian(g) => GaussianMixture::single(g),
            InputDistribution::Mixture(m) => m,
        }
    }
}

impl GaussianComponents for InputDistribution {
    fn dim(&self) -> usize {
        match self {
            InputDistribution::Gaussian(g) => g.dim(),
            InputDistribution::Mixture(m) => m.dim(),
        }
    }
    fn weighted(&self) -> Vec<(f64, &Gaussian)> {
        match self {
            InputDistribution::Gaussian(g) => g.weighted(),
            InputDistribution::Mixture(m) => m.weighted(),
        }
    }
}

impl From<Gaussian> for InputDistribution {
    fn from(g: Gaussian) -> Self {
        InputDistribution::Gaussian(g)
    }
}

impl From<GaussianMixture> for InputDistribution {
    fn from(m: GaussianMixture) -> Self {
        InputDistribution::Mixture(m)
    }
}

/// Means and covariance of `n` jointly Gaussian scalars `X_1..X_n`.
#[derive(Debug, Clone)]
pub struct MomentSpec {
    means: Vec<f64>,
    cov: DMatrix<f64>,
}

impl MomentSpec {
    pub fn new(means: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != means.len() || cov.ncols() != means.len() {
            return Err(Error::invalid(format!(
                "moment spec: {} means but {}x{} covariance",
                means.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        let cov = validated_covariance(&cov, "moment spec")?;
        Ok(Self { means, cov })
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
}

/// `E[X_1 ⋯ X_n]` as a sum over partitions into singletons (means) and
/// pairs (covariances).
pub fn isserlis_noncentral(spec: &MomentSpec) -> Result<f64> {
    let n = spec.len();
    if n > MAX_ISSERLIS_ORDER {
        return Err(Error::DegreeTooHigh { degree: n, max: MAX_ISSERLIS_ORDER });
    }
    let idx: Vec<usize> = (0..n).collect();
    Ok(noncentral_product(&idx, &spec.means, &spec.cov))
}

/// Zero-mean Isserlis: sum over perfect pairings; zero for odd order.
pub fn isserlis_central(cov: &DMatrix<f64>) -> Result<f64> {
    if !cov.is_square() {
        return Err(Error::invalid("isserlis_central: covariance must be square"));
    }
    let n = cov.nrows();
    if n > MAX_ISSERLIS_ORDER {
        return Err(Error::DegreeTooHigh { degree: n, max: MAX_ISSERLIS_ORDER });
    }
    let idx: Vec<usize> = (0..n).collect();
    Ok(central_product(&idx, cov))
}

/// Noncentral product moment over `idx` (indices may repeat). No validation.
pub(crate) fn noncentral_product(idx: &[usize], means: &[f64], cov: &DMatrix<f64>) -> f64 {
    debug_assert!(idx.len() <= 16);
    fn rec(mask: u32, idx: &[usize], means: &[f64], cov: &DMatrix<f64>) -> f64 {
        if mask == 0 {
            return 1.0;
        }
        let first = mask.trailing_zeros() as usize;
        let rest = mask & !(1 << first);
        let a = idx[first];
        let mut total = means[a] * rec(rest, idx, means, cov);
        let mut others = rest;
        while others != 0 {
            let j = others.trailing_zeros() as usize;
            others &= others - 1;
            total += cov[(a, idx[j])] * rec(rest & !(1 << j), idx, means, cov);
        }
        total
    }
    rec((1u32 << idx.len()) - 1, idx, means, cov)
}

/// Central product moment over `idx`. No validation.
pub(crate) fn central_product(idx: &[usize], cov: &DMatrix<f64>) -> f64 {
    fn rec(mask: u32, idx: &[usize], cov: &DMatrix<f64>) -> f64 {
        if mask == 0 {
            return 1.0;
        }
        if mask.count_ones() % 2 == 1 {
            return 0.0;
        }
        let first = mask.trailing_zeros() as usize;
        let rest = mask & !(1 << first);
        let a = idx[first];
        let mut total = 0.0;
        let mut others = rest;
        while others != 0 {
            let j = others.trailing_zeros() as usize;
            others &= others - 1;
            total += cov[(a, idx[j])] * rec(rest & !(1 << j), idx, cov);
        }
        total
    }
    rec((1u32 << idx.len()) - 1, idx, cov)
}

fn weighted_mean(vs: &[DVector<f64>], weights: &[f64]) -> DVector<f64> {
    let mut acc = DVector::zeros(vs[0].len());
    for (v, w) in vs.iter().zip(weights) {
        acc.axpy(*w, v, 1.0);
    }
    acc
}

/// Cross-covariance of `X` and `Y` under a mixture:
/// `E[Σ_{XY|Z}] + Σ_{E[X|Z], E[Y|Z]}`.
pub fn mixture_total_covariance(
    means_x: &[DVector<f64>],
    means_y: &[DVector<f64>],
    cross_covs: &[DMatrix<f64>],
    weights: &[f64],
) -> Result<DMatrix<f64>> {
    let m = weights.len();
    if m == 0 || means_x.len() != m || means_y.len() != m || cross_covs.len() != m {
        return Err(Error::invalid(format!(
            "total covariance: expected {m} components in every list (got {}, {}, {})",
            means_x.len(),
            means_y.len(),
            cross_covs.len()
        )));
    }
    check_simplex(weights)?;
    let (p, q) = (means_x[0].len(), means_y[0].len());
    for c in 0..m {
        if means_x[c].len() != p || means_y[c].len() != q || cross_covs[c].shape() != (p, q) {
            return Err(Error::invalid(format!("total covariance: component {c} has inconsistent shape")));
        }
    }
    Ok(total_covariance_unchecked(means_x, means_y, cross_covs, weights))
}

pub(crate) fn total_covariance_unchecked(
    means_x: &[DVector<f64>],
    means_y: &[DVector<f64>],
    cross_covs: &[DMatrix<f64>],
    weights: &[f64],
) -> DMatrix<f64> {
    let grand_x = weighted_mean(means_x, weights);
    let grand_y = weighted_mean(means_y, weights);
    let mut total = DMatrix::zeros(grand_x.len(), grand_y.len());
    for c in 0..weights.len() {
        let w = weights[c];
        total += &cross_covs[c] * w;
        let dx = &means_x[c] - &grand_x;
        let dy = &means_y[c] - &grand_y;
        total.ger(w, &dx, &dy, 1.0);
    }
    total
}

/// Precomputed per-component factors for drawing samples.
pub(crate) struct Sampler {
    means: Vec<DVector<f64>>,
    factors: Vec<DMatrix<f64>>,
    cumulative: Vec<f64>,
    dim: usize,
}

fn sampling_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(chol) = Cholesky::new(cov.clone()) {
        return chol.l();
    }
    // singular: V diag(sqrt(max(λ, 0)))
    let eig = SymmetricEigen::new(cov.clone());
    let mut f = eig.eigenvectors;
    for (j, lam) in eig.eigenvalues.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        f.column_mut(j).scale_mut(s);
    }
    f
}

impl Sampler {
    pub(crate) fn new<D: GaussianComponents + ?Sized>(dist: &D) -> Self {
        let comps = dist.weighted();
        let mut acc = 0.0;
        let cumulative = comps
            .iter()
            .map(|(w, _)| {
                acc += w;
                acc
            })
            .collect();
        Self {
            means: comps.iter().map(|(_, g)| g.mean.clone()).collect(),
            factors: comps.iter().map(|(_, g)| sampling_factor(&g.cov)).collect(),
            cumulative,
            dim: dist.dim(),
        }
    }

    fn pick(&self, u: f64) -> usize {
        let total = *self.cumulative.last().unwrap();
        let target = u * total;
        self.cumulative
            .iter()
            .position(|&c| target < c)
            .unwrap_or_else(|| self.cumulative.iter().rposition(|&c| c > 0.0).unwrap_or(0))
    }

    /// Fills `rows` (row-major, `count × dim`) and `labels` for chunk `chunk`
    /// of the stream identified by `seed`.
    pub(crate) fn fill_chunk(&self, seed: u64, chunk: u64, count: usize, rows: &mut Vec<f64>, labels: &mut Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(chunk);
        rows.clear();
        labels.clear();
        let d = self.dim;
        let mut z = vec![0.0; d];
        for _ in 0..count {
            let comp = if self.means.len() == 1 { 0 } else { self.pick(rng.random::<f64>()) };
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            let f = &self.factors[comp];
            let mu = &self.means[comp];
            for r in 0..d {
                let mut v = mu[r];
                for (c, zc) in z.iter().enumerate() {
                    v += f[(r, c)] * zc;
                }
                rows.push(v);
            }
            labels.push(comp);
        }
    }

    /// Draws `n` labeled rows, chunked so the result is independent of threading.
    pub(crate) fn draw(&self, n: usize, seed: u64) -> (DMatrix<f64>, Vec<usize>) {
        let chunks = n.div_ceil(SAMPLE_CHUNK);
        let parts = par::map_indexed(chunks, |c| {
            let count = SAMPLE_CHUNK.min(n - c * SAMPLE_CHUNK);
            let (mut rows, mut labels) = (Vec::with_capacity(count * self.dim), Vec::with_capacity(count));
            self.fill_chunk(seed, c as u64, count, &mut rows, &mut labels);
            (rows, labels)
        });
        let mut all_rows = Vec::with_capacity(n * self.dim);
        let mut all_labels = Vec::with_capacity(n);
        for (rows, labels) in parts {
            all_rows.extend(rows);
            all_labels.extend(labels);
        }
        (DMatrix::from_row_slice(n, self.dim, &all_rows), all_labels)
    }
}

/// Draws `n` samples as an `n × d` matrix. Deterministic for a fixed seed.
pub fn sample<D: GaussianComponents + ?Sized>(dist: &D, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    Ok(sample_labeled(dist, n, seed)?.0)
}

/// Like [`sample`], also returning the mixture component of each row.
pub fn sample_labeled<D: GaussianComponents + ?Sized>(
    dist: &D,
    n: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    for (_, g) in dist.weighted() {
        validated_covariance(&g.cov, "sample")?;
    }
    Ok(Sampler::new(dist).draw(n, seed))
}
