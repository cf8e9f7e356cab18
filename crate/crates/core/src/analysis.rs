//! Monte-Carlo evaluation of approximants, spectra of quadratic terms, and
//! SVD projection attacks.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::approx::{Approximant, LinearApproximant, Network, QuadraticApproximant};
use crate::error::{Error, Result};
use crate::gauss::{validated_covariance, GaussianComponents, Sampler, SAMPLE_CHUNK};
use crate::par;

pub const MIN_EVAL_SAMPLES: usize = 1000;
pub const DEFAULT_EVAL_SAMPLES: usize = 200_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fvu: f64,
    /// Mean `KL(softmax(f) ‖ softmax(g))`, natural log.
    pub kl: f64,
    pub accuracy_net: f64,
    pub accuracy_approx: f64,
    pub n_samples: usize,
    pub seed: u64,
}

/// One CSV row of a sweep. Column order is the field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub kind: String,
    pub fvu: f64,
    pub kl: f64,
    pub acc_net: f64,
    pub acc_approx: f64,
    pub n: usize,
    pub seed: u64,
}

impl MetricsRecord {
    pub fn new(step: usize, kind: &str, r: &EvalReport) -> Self {
        Self {
            step,
            kind: kind.to_string(),
            fvu: r.fvu,
            kl: r.kl,
            acc_net: r.accuracy_net,
            acc_approx: r.accuracy_approx,
            n: r.n_samples,
            seed: r.seed,
        }
    }
}

/// Reference labels for the accuracy columns.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum LabelRule {
    /// Index of the mixture component each sample was drawn from.
    #[default]
    Component,
    /// Argmax of the network output (approximant accuracy becomes agreement).
    NetworkArgmax,
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions<'a> {
    pub labels: LabelRule,
    /// Applied to every sample before it reaches the network and approximant.
    pub projection: Option<&'a AttackProjection>,
}

#[derive(Debug, Clone)]
struct Accumulator {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
    sq_err: f64,
    kl: f64,
    correct_net: usize,
    correct_approx: usize,
}

impl Accumulator {
    fn new(o: usize) -> Self {
        Self { n: 0, mean: vec![0.0; o], m2: vec![0.0; o], sq_err: 0.0, kl: 0.0, correct_net: 0, correct_approx: 0 }
    }

    fn push(&mut self, f: &[f64], g: &[f64], label: Option<usize>) {
        self.n += 1;
        let n = self.n as f64;
        for (k, &v) in f.iter().enumerate() {
            let delta = v - self.mean[k];
            self.mean[k] += delta / n;
            self.m2[k] += delta * (v - self.mean[k]);
        }
        self.sq_err += f.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        self.kl += softmax_kl(f, g);
        let net_arg = argmax(f);
        let target = label.unwrap_or(net_arg);
        self.correct_net += usize::from(net_arg == target);
        self.correct_approx += usize::from(argmax(g) == target);
    }

    /// Chan et al. pairwise merge.
    fn merge(mut self, other: &Self) -> Self {
        if other.n == 0 {
            return self;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        for k in 0..self.mean.len() {
            let delta = other.mean[k] - self.mean[k];
            self.mean[k] += delta * nb / n;
            self.m2[k] += other.m2[k] + delta * delta * na * nb / n;
        }
        self.n += other.n;
        self.sq_err += other.sq_err;
        self.kl += other.kl;
        self.correct_net += other.correct_net;
        self.correct_approx += other.correct_approx;
        self
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn log_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

/// `KL(softmax(p) ‖ softmax(q))` for logit vectors.
pub fn softmax_kl(p: &[f64], q: &[f64]) -> f64 {
    let lp = log_softmax(p);
    let lq = log_softmax(q);
    lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum()
}

/// FVU of predictions `g` against targets `f` (both `n × o`).
pub fn fvu_of(f: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<f64> {
    if f.shape() != g.shape() {
        return Err(Error::invalid("fvu: shape mismatch"));
    }
    let mut acc = Accumulator::new(f.ncols());
    let (mut fr, mut gr) = (vec![0.0; f.ncols()], vec![0.0; f.ncols()]);
    for r in 0..f.nrows() {
        for k in 0..f.ncols() {
            fr[k] = f[(r, k)];
            gr[k] = g[(r, k)];
        }
        acc.push(&fr, &gr, None);
    }
    finish_fvu(&acc)
}

fn finish_fvu(acc: &Accumulator) -> Result<f64> {
    let var: f64 = acc.m2.iter().sum();
    if !(var > 0.0) || !var.is_finite() {
        return Err(Error::ZeroOutputVariance);
    }
    Ok(acc.sq_err / var)
}

pub fn evaluate<D: GaussianComponents + ?Sized>(
    net: &Network,
    approx: &Approximant,
    dist: &D,
    n: usize,
    seed: u64,
) -> Result<EvalReport> {
    evaluate_with(net, approx, dist, n, seed, &EvalOptions::default())
}

/// Draws `n` samples in fixed chunks, evaluates both models, and merges the
/// per-chunk accumulators in chunk order so the result does not depend on the
/// thread count.
pub fn evaluate_with<D: GaussianComponents + ?Sized>(
    net: &Network,
    approx: &Approximant,
    dist: &D,
    n: usize,
    seed: u64,
    opts: &EvalOptions<'_>,
) -> Result<EvalReport> {
    if n < MIN_EVAL_SAMPLES {
        return Err(Error::invalid(format!("evaluation needs n >= {MIN_EVAL_SAMPLES}, got {n}")));
    }
    let d = dist.dim();
    if net.input_dim() != d || approx.input_dim() != d {
        return Err(Error::invalid("evaluate: network, approximant and distribution dimensions differ"));
    }
    if net.output_dim() != approx.output_dim() {
        return Err(Error::invalid("evaluate: network and approximant output dimensions differ"));
    }
    if let Some(p) = opts.projection {
        if p.matrix.nrows() != d {
            return Err(Error::invalid("evaluate: projection dimension mismatch"));
        }
    }
    for (_, g) in dist.weighted() {
        validated_covariance(g.cov(), "covariance")?;
    }
    let sampler = Sampler::new(dist);
    let o = net.output_dim();
    let chunks = n.div_ceil(SAMPLE_CHUNK);
    let parts = par::map_indexed(chunks, |c| {
        let count = SAMPLE_CHUNK.min(n - c * SAMPLE_CHUNK);
        let (mut rows, mut labels) = (Vec::new(), Vec::new());
        sampler.fill_chunk(seed, c as u64, count, &mut rows, &mut labels);
        let mut x = DMatrix::from_row_slice(count, d, &rows);
        if let Some(p) = opts.projection {
            x = apply_attack(&x, p);
        }
        let f = net.forward_rows(&x);
        let g = approx.predict_rows(&x);
        let mut acc = Accumulator::new(o);
        let (mut fr, mut gr) = (vec![0.0; o], vec![0.0; o]);
        for r in 0..count {
            for k in 0..o {
                fr[k] = f[(r, k)];
                gr[k] = g[(r, k)];
            }
            let label = match opts.labels {
                LabelRule::Component => Some(labels[r]),
                LabelRule::NetworkArgmax => None,
            };
            acc.push(&fr, &gr, label);
        }
        acc
    });
    let acc = parts.iter().fold(Accumulator::new(o), |a, b| a.merge(b));
    let fvu = finish_fvu(&acc)?;
    let total = acc.n as f64;
    Ok(EvalReport {
        fvu,
        kl: acc.kl / total,
        accuracy_net: acc.correct_net as f64 / total,
        accuracy_approx: acc.correct_approx as f64 / total,
        n_samples: acc.n,
        seed,
    })
}

/// Eigendecomposition of one interaction matrix `q_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    /// Sorted by magnitude, largest first.
    pub eigenvalues: Vec<f64>,
    /// Column `i` pairs with `eigenvalues[i]`.
    pub eigenvectors: DMatrix<f64>,
    pub class_index: usize,
}

impl Spectrum {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let v = &self.eigenvectors;
        let lam = DMatrix::from_diagonal(&DVector::from_column_slice(&self.eigenvalues));
        v * lam * v.transpose()
    }
}

pub fn quadratic_spectrum(approx: &QuadraticApproximant, class_index: usize) -> Result<Spectrum> {
    let q = approx
        .q
        .get(class_index)
        .ok_or_else(|| Error::invalid(format!("class index {class_index} out of range (o = {})", approx.q.len())))?;
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("interaction matrix has non-finite entries"));
    }
    let sym = (q + q.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = q.nrows();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].abs().total_cmp(&eig.eigenvalues[a].abs()).then(a.cmp(&b)));
    let mut vectors = DMatrix::zeros(d, d);
    let mut values = Vec::with_capacity(d);
    for (dst, &src) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(src).into_owned();
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                v.neg_mut();
            }
        }
        vectors.set_column(dst, &v);
        values.push(eig.eigenvalues[src]);
    }
    Ok(Spectrum { eigenvalues: values, eigenvectors: vectors, class_index })
}

/// `P_k = I − Σ_{i≤k} u_i u_iᵀ` over the top left singular vectors of `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackProjection {
    pub matrix: DMatrix<f64>,
    pub k: usize,
}

impl AttackProjection {
    pub fn identity(d: usize) -> Self {
        Self { matrix: DMatrix::identity(d, d), k: 0 }
    }
}

/// Left singular vectors of `beta` (columns) with singular values descending,
/// truncated to the numerical rank.
pub fn beta_left_singular(beta: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let svd = beta.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let smax = order.first().map_or(0.0, |&i| svd.singular_values[i]);
    let tol = smax * beta.nrows().max(beta.ncols()) as f64 * f64::EPSILON;
    let kept: Vec<usize> = order.into_iter().filter(|&i| svd.singular_values[i] > tol && smax > 0.0).collect();
    let mut basis = DMatrix::zeros(beta.nrows(), kept.len());
    for (dst, &src) in kept.iter().enumerate() {
        basis.set_column(dst, &u.column(src));
    }
    (basis, kept.iter().map(|&i| svd.singular_values[i]).collect())
}

/// `k = 0` yields the identity.
pub fn svd_attack_projection(approx: &LinearApproximant, k: usize) -> Result<AttackProjection> {
    let d = approx.beta.nrows();
    let (u, s) = beta_left_singular(&approx.beta);
    if k > s.len() {
        return Err(Error::invalid(format!("k = {k} exceeds rank(beta) = {}", s.len())));
    }
    let uk = u.columns(0, k);
    let matrix = DMatrix::identity(d, d) - uk * uk.transpose();
    Ok(AttackProjection { matrix, k })
}

pub fn apply_attack(inputs: &DMatrix<f64>, proj: &AttackProjection) -> DMatrix<f64> {
    // rows are samples: x' = P x  ⇔  X' = X Pᵀ = X P
    inputs * &proj.matrix
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub k: usize,
    pub acc_net: f64,
    pub acc_linear: f64,
    pub acc_quadratic: Option<f64>,
}

/// Accuracy of the network and its approximants under `P_k` for `k = 0..=rank`,
/// all on one common sample.
pub fn attack_curve<D: GaussianComponents + ?Sized>(
    net: &Network,
    linear: &LinearApproximant,
    quadratic: Option<&QuadraticApproximant>,
    dist: &D,
    n: usize,
    seed: u64,
) -> Result<Vec<AttackRow>> {
    let rank = beta_left_singular(&linear.beta).1.len();
    let lin = Approximant::Linear(linear.clone());
    let quad = quadratic.map(|q| Approximant::Quadratic(q.clone()));
    (0..=rank)
        .map(|k| {
            let proj = svd_attack_projection(linear, k)?;
            let opts = EvalOptions { labels: LabelRule::Component, projection: Some(&proj) };
            let acc = |a: &Approximant| -> Result<(f64, f64)> {
                // the projected network can be constant; accuracies are still defined
                match evaluate_with(net, a, dist, n, seed, &opts) {
                    Ok(r) => Ok((r.accuracy_net, r.accuracy_approx)),
                    Err(Error::ZeroOutputVariance) => accuracy_only(net, a, dist, n, seed, &proj),
                    Err(e) => Err(e),
                }
            };
            let (acc_net, acc_linear) = acc(&lin)?;
            let acc_quadratic = quad.as_ref().map(|q| acc(q).map(|r| r.1)).transpose()?;
            Ok(AttackRow { k, acc_net, acc_linear, acc_quadratic })
        })
        .collect()
}

fn accuracy_only<D: GaussianComponents + ?Sized>(
    net: &Network,
    approx: &Approximant,
    dist: &D,
    n: usize,
    seed: u64,
    proj: &AttackProjection,
) -> Result<(f64, f64)> {
    let (x, labels) = Sampler::new(dist).draw(n, seed);
    let x = apply_attack(&x, proj);
    let f = net.forward_rows(&x);
    let g = approx.predict_rows(&x);
    let hits = |m: &DMatrix<f64>| {
        (0..n).filter(|&r| argmax(m.row(r).transpose().as_slice()) == labels[r]).count() as f64 / n as f64
    };
    Ok((hits(&f), hits(&g)))
}
