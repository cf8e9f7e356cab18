//! Desk-scale training-dynamics experiment on a synthetic Gaussian-mixture
//! classification task: train a small ReLU MLP, checkpoint it, and trace how
//! well linear and quadratic approximants explain it over training.
//!
//! All class information lives in a random `(classes − 1)`-dimensional signal
//! subspace: class means sit on a centered simplex there and class covariances
//! differ only there (condition number bounded by `cov_condition`). On the
//! orthogonal complement every class is `N(0, I)`.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::actint::Activation;
use crate::analysis::{attack_curve, evaluate, AttackRow, MetricsRecord, DEFAULT_EVAL_SAMPLES};
use crate::approx::{
    linear_approx, quadratic_approx, refine_quadratic, ApproxConfig, Approximant, MlpSpec, Network, RefineConfig,
};
use crate::bundle::{network_to_bundle, save_distribution, Tensor};
use crate::error::{Error, Result};
use crate::gauss::{Gaussian, GaussianMixture, InputDistribution, Sampler};
use crate::par;

/// Largest `d` accepted for harness tasks.
pub const MAX_TASK_DIM: usize = 64;
/// Covariance shrinkage used by [`fit_mixture_from_data`].
pub const SHRINKAGE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub d: usize,
    pub classes: usize,
    /// Size of the fixed training pool; `0` draws fresh samples every step.
    #[serde(default)]
    pub train_size: usize,
    pub seed: u64,
    /// Distance from each class mean to the centroid.
    pub separation: f64,
    /// Bound on the condition number of each class covariance.
    #[serde(default = "default_condition")]
    pub cov_condition: f64,
}

fn default_condition() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub d: usize,
    pub classes: usize,
    pub mixture: GaussianMixture,
    pub train_size: usize,
    pub seed: u64,
    /// Orthonormal `d × (classes − 1)` basis of the signal subspace.
    pub signal_basis: DMatrix<f64>,
}

fn orthonormal_columns(rng: &mut ChaCha8Rng, d: usize, k: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    g.qr().q().columns(0, k).into_owned()
}

/// Vertices of a regular simplex with `m` vertices, centered at the origin
/// and unit distance from it, in `m − 1` coordinates (one per column).
fn simplex_vertices(m: usize) -> DMatrix<f64> {
    if m == 1 {
        return DMatrix::zeros(0, 1);
    }
    let centered = DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { 0.0 } - 1.0 / m as f64);
    // orthonormal coordinates of the (m−1)-dimensional span
    let eig = nalgebra::SymmetricEigen::new(&centered * centered.transpose());
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let basis = DMatrix::from_fn(m, m - 1, |r, c| eig.eigenvectors[(r, order[c])]);
    let coords = basis.transpose() * centered;
    let radius = coords.column(0).norm();
    coords / radius
}

pub fn synthetic_task(cfg: &TaskConfig) -> Result<TaskSpec> {
    let (d, c) = (cfg.d, cfg.classes);
    if c < 2 || d < c - 1 || d > MAX_TASK_DIM {
        return Err(Error::invalid(format!(
            "task needs 2 <= classes and classes - 1 <= d <= {MAX_TASK_DIM} (got d = {d}, classes = {c})"
        )));
    }
    if !(cfg.separation >= 0.0 && cfg.separation.is_finite()) || !(cfg.cov_condition >= 1.0) {
        return Err(Error::invalid("task separation must be finite and >= 0, cov_condition >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s = c - 1;
    let basis = orthonormal_columns(&mut rng, d, s);
    let verts = simplex_vertices(c) * cfg.separation;
    let complement = DMatrix::identity(d, d) - &basis * basis.transpose();
    let half_log = 0.5 * cfg.cov_condition.ln();
    let comps = (0..c)
        .map(|k| {
            let rot = orthonormal_columns(&mut rng, s, s);
            let eig = DVector::from_fn(s, |_, _| (half_log * (2.0 * rng.random::<f64>() - 1.0)).exp());
            let inner = &rot * DMatrix::from_diagonal(&eig) * rot.transpose();
            let cov = &basis * inner * basis.transpose() + &complement;
            Gaussian::new(&basis * verts.column(k), cov)
        })
        .collect::<Result<Vec<_>>>()?;
    let mixture = GaussianMixture::new(vec![1.0 / c as f64; c], comps)?;
    Ok(TaskSpec { d, classes: c, mixture, train_size: cfg.train_size, seed: cfg.seed, signal_basis: basis })
}

/// Per-class empirical moments with covariance shrinkage
/// `(1 − τ)Σ̂ + τ·trace(Σ̂)/d·I`, `τ = 0.01`.
pub fn fit_mixture_from_data(features: &DMatrix<f64>, labels: &[usize]) -> Result<GaussianMixture> {
    let (n, d) = features.shape();
    if labels.len() != n || n == 0 {
        return Err(Error::invalid("features and labels must be nonempty and of equal length"));
    }
    let classes = labels.iter().max().unwrap() + 1;
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!("class {empty} has no samples")));
    }
    let mut comps = Vec::with_capacity(classes);
    for (cls, &count) in counts.iter().enumerate() {
        let rows: Vec<usize> = (0..n).filter(|&r| labels[r] == cls).collect();
        let x = features.select_rows(&rows);
        let mean = x.row_mean().transpose();
        let centered = DMatrix::from_fn(count, d, |r, c| x[(r, c)] - mean[c]);
        let emp = centered.transpose() * &centered / count as f64;
        let floor = emp.trace() / d as f64;
        let floor = if floor > 0.0 { floor } else { 1.0 };
        let cov = emp * (1.0 - SHRINKAGE) + DMatrix::identity(d, d) * (SHRINKAGE * floor);
        comps.push(Gaussian::new(mean, cov)?);
    }
    let weights = counts.iter().map(|&c| c as f64 / n as f64).collect();
    GaussianMixture::normalized(weights, comps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: usize,
    pub batch: usize,
    pub steps: usize,
    pub step_size: f64,
    pub weight_decay: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub checkpoint_steps: Vec<usize>,
    pub seed: u64,
}

fn default_momentum() -> f64 {
    0.9
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.batch == 0 {
            return Err(Error::invalid("hidden and batch must be positive"));
        }
        if !(self.step_size > 0.0) || !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("need step_size > 0, weight_decay >= 0, 0 <= momentum < 1"));
        }
        if self.checkpoint_steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("checkpoint_steps must be strictly increasing"));
        }
        if self.checkpoint_steps.last().is_some_and(|&s| s > self.steps) {
            return Err(Error::invalid("checkpoint step beyond the last training step"));
        }
        Ok(())
    }
}

/// Steps `0, 1, 2, 4, …` up to and including `steps` when it is a power of two.
pub fn power_of_two_checkpoints(steps: usize) -> Vec<usize> {
    let mut out = vec![0];
    let mut s = 1;
    while s <= steps {
        out.push(s);
        s *= 2;
    }
    if *out.last().unwrap() != steps {
        out.push(steps);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub net: MlpSpec,
}

struct Params {
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    w2: DMatrix<f64>,
    b2: DVector<f64>,
}

impl Params {
    fn init(rng: &mut ChaCha8Rng, d: usize, h: usize, o: usize) -> Self {
        // uniform(±1/√fan_in) for weights and biases
        let mut u = |r: usize, c: usize, fan: usize| {
            let b = 1.0 / (fan as f64).sqrt();
            DMatrix::from_fn(r, c, |_, _| b * (2.0 * rng.random::<f64>() - 1.0))
        };
        let w1 = u(h, d, d);
        let b1 = u(h, 1, d).column(0).into_owned();
        let w2 = u(o, h, h);
        let b2 = u(o, 1, h).column(0).into_owned();
        Self { w1, b1, w2, b2 }
    }

    fn zeros_like(&self) -> Self {
        Self {
            w1: DMatrix::zeros(self.w1.nrows(), self.w1.ncols()),
            b1: DVector::zeros(self.b1.len()),
            w2: DMatrix::zeros(self.w2.nrows(), self.w2.ncols()),
            b2: DVector::zeros(self.b2.len()),
        }
    }

    fn snapshot(&self) -> MlpSpec {
        MlpSpec { w1: self.w1.clone(), b1: self.b1.clone(), w2: self.w2.clone(), b2: self.b2.clone(), act: Activation::Relu }
    }

    /// Mean softmax cross-entropy on a batch and its gradient.
    fn loss_and_grad(&self, x: &DMatrix<f64>, y: &[usize]) -> (f64, Params) {
        let bsz = x.nrows();
        let mut z = x * self.w1.transpose();
        for mut row in z.row_iter_mut() {
            row += self.b1.transpose();
        }
        let a = z.map(|v| v.max(0.0));
        let mut logits = &a * self.w2.transpose();
        for mut row in logits.row_iter_mut() {
            row += self.b2.transpose();
        }
        let mut loss = 0.0;
        let mut dl = logits.clone();
        for (r, mut row) in dl.row_iter_mut().enumerate() {
            let m = row.max();
            row.apply(|v| *v = (*v - m).exp());
            let s = row.sum();
            loss -= (row[y[r]] / s).ln();
            row /= s * bsz as f64;
            row[y[r]] -= 1.0 / bsz as f64;
        }
        let gw2 = dl.transpose() * &a;
        let gb2 = dl.row_sum().transpose();
        let mut dz = &dl * &self.w2;
        dz.zip_apply(&z, |g, zv| {
            if zv <= 0.0 {
                *g = 0.0
            }
        });
        let gw1 = dz.transpose() * x;
        let gb1 = dz.row_sum().transpose();
        (loss / bsz as f64, Params { w1: gw1, b1: gb1, w2: gw2, b2: gb2 })
    }
}

/// Trains a ReLU MLP with softmax cross-entropy, SGD with momentum and
/// decoupled weight decay (`w ← w − lr·wd·w`). Returns one checkpoint per
/// requested step (step 0 is the initialization).
pub fn train_mlp(task: &TaskSpec, cfg: &TrainConfig) -> Result<Vec<Checkpoint>> {
    cfg.validate()?;
    let (d, o) = (task.d, task.classes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut p = Params::init(&mut rng, d, cfg.hidden, o);
    let mut vel = p.zeros_like();
    let sampler = Sampler::new(&task.mixture);
    let pool = (task.train_size > 0).then(|| sampler.draw(task.train_size, cfg.seed ^ 0x7261_696e));
    let indices: Vec<usize> = (0..task.train_size).collect();

    let mut out = Vec::with_capacity(cfg.checkpoint_steps.len());
    let mut next = cfg.checkpoint_steps.iter().peekable();
    let (mut rows, mut labels) = (Vec::new(), Vec::new());
    let (lr, wd, mu) = (cfg.step_size, cfg.weight_decay, cfg.momentum);
    for step in 0..=cfg.steps {
        if next.peek().is_some_and(|&&s| s == step) {
            next.next();
            out.push(Checkpoint { step, net: p.snapshot() });
        }
        if step == cfg.steps {
            break;
        }
        let (x, y) = match &pool {
            Some((px, py)) => {
                let pick: Vec<usize> = (0..cfg.batch).map(|_| *indices.choose(&mut rng).unwrap()).collect();
                (px.select_rows(&pick), pick.iter().map(|&i| py[i]).collect::<Vec<_>>())
            }
            None => {
                sampler.fill_chunk(cfg.seed, step as u64, cfg.batch, &mut rows, &mut labels);
                (DMatrix::from_row_slice(cfg.batch, d, &rows), labels.clone())
            }
        };
        let (loss, g) = p.loss_and_grad(&x, &y);
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step });
        }
        macro_rules! update {
            ($f:ident) => {
                vel.$f = &vel.$f * mu + &g.$f;
                p.$f -= &vel.$f * lr;
                p.$f *= 1.0 - lr * wd;
            };
        }
        update!(w1);
        update!(b1);
        update!(w2);
        update!(b2);
    }
    Ok(out)
}

/// Classification accuracy of `net` on labeled rows.
pub fn accuracy(net: &MlpSpec, x: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let f = net.forward_rows(x);
    let hits = (0..x.nrows()).filter(|&r| f.row(r).transpose().argmax().0 == labels[r]).count();
    hits as f64 / x.nrows().max(1) as f64
}

/// Approximants fitted to one checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointFit {
    pub step: usize,
    pub linear: Approximant,
    pub quadratic: Approximant,
}

/// Settings for the quadratic fit when the closed form is disabled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepFitConfig {
    pub mixture_quadratic_max_d: usize,
    pub refine_steps: usize,
    pub refine_batch: usize,
    pub refine_step_size: f64,
}

impl Default for SweepFitConfig {
    fn default() -> Self {
        Self { mixture_quadratic_max_d: 32, refine_steps: 20_000, refine_batch: 256, refine_step_size: 1e-3 }
    }
}

pub fn fit_checkpoint(task: &TaskSpec, ck: &Checkpoint, fit: &SweepFitConfig, seed: u64) -> Result<CheckpointFit> {
    let net = Network::Mlp(ck.net.clone());
    let linear = linear_approx(&net, &task.mixture)?;
    let cfg = ApproxConfig { mixture_quadratic_max_d: fit.mixture_quadratic_max_d, ..Default::default() };
    let quadratic = match quadratic_approx(&net, &task.mixture, &cfg) {
        Err(Error::UseRefine { .. }) => {
            let init = quadratic_approx(&net, &Gaussian::standard(task.d), &cfg)?;
            let rc = RefineConfig {
                steps: fit.refine_steps,
                batch: fit.refine_batch,
                seed,
                step_size: fit.refine_step_size,
                ..Default::default()
            };
            refine_quadratic(&init, &net, &task.mixture, &rc)?
        }
        other => other?,
    };
    Ok(CheckpointFit { step: ck.step, linear: Approximant::Linear(linear), quadratic: Approximant::Quadratic(quadratic) })
}

pub fn complexity_sweep(task: &TaskSpec, checkpoints: &[Checkpoint], eval_n: usize, seed: u64) -> Result<Vec<MetricsRecord>> {
    Ok(sweep_with_fits(task, checkpoints, eval_n, seed, &SweepFitConfig::default())?.0)
}

/// One linear and one quadratic record per checkpoint, in checkpoint order.
pub fn sweep_with_fits(
    task: &TaskSpec,
    checkpoints: &[Checkpoint],
    eval_n: usize,
    seed: u64,
    fit: &SweepFitConfig,
) -> Result<(Vec<MetricsRecord>, Vec<CheckpointFit>)> {
    if checkpoints.is_empty() {
        return Err(Error::invalid("complexity sweep needs at least one checkpoint"));
    }
    let per = par::try_map_indexed(checkpoints.len(), |i| {
        let ck = &checkpoints[i];
        let fits = fit_checkpoint(task, ck, fit, seed)?;
        let net = Network::Mlp(ck.net.clone());
        let lin = evaluate(&net, &fits.linear, &task.mixture, eval_n, seed)?;
        let quad = evaluate(&net, &fits.quadratic, &task.mixture, eval_n, seed)?;
        Ok::<_, Error>((
            [MetricsRecord::new(ck.step, "linear", &lin), MetricsRecord::new(ck.step, "quadratic", &quad)],
            fits,
        ))
    })?;
    let mut records = Vec::with_capacity(2 * per.len());
    let mut fits = Vec::with_capacity(per.len());
    for (r, f) in per {
        records.extend(r);
        fits.push(f);
    }
    Ok((records, fits))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    #[serde(default = "default_eval_n")]
    pub n: usize,
    pub seed: u64,
}

fn default_eval_n() -> usize {
    DEFAULT_EVAL_SAMPLES
}

/// A full experiment, read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub task: TaskConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub attack: EvalSettings,
    #[serde(default)]
    pub fit: SweepFitConfig,
}

impl SweepConfig {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub task: TaskSpec,
    pub checkpoints: Vec<Checkpoint>,
    pub records: Vec<MetricsRecord>,
    pub fits: Vec<CheckpointFit>,
    /// Accuracy under the SVD attack on the final checkpoint.
    pub attack: Vec<AttackRow>,
}

pub fn run_sweep_in_memory(cfg: &SweepConfig) -> Result<SweepOutput> {
    let task = synthetic_task(&cfg.task)?;
    let checkpoints = train_mlp(&task, &cfg.train)?;
    let (records, fits) = sweep_with_fits(&task, &checkpoints, cfg.eval.n, cfg.eval.seed, &cfg.fit)?;
    let attack = match (checkpoints.last(), fits.last()) {
        (Some(ck), Some(fit)) => {
            let (Approximant::Linear(lin), Approximant::Quadratic(quad)) = (&fit.linear, &fit.quadratic) else {
                unreachable!("fit kinds are fixed")
            };
            attack_curve(&Network::Mlp(ck.net.clone()), lin, Some(quad), &task.mixture, cfg.attack.n, cfg.attack.seed)?
        }
        _ => Vec::new(),
    };
    Ok(SweepOutput { task, checkpoints, records, fits, attack })
}

pub fn write_metrics_csv(path: impl AsRef<Path>, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_attack_csv(path: impl AsRef<Path>, rows: &[AttackRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the experiment and writes `metrics.csv`, `attack.csv`, `task.json`
/// and one `checkpoint_<step>.bin` bundle per checkpoint into `out_dir`.
pub fn run_sweep(cfg: &SweepConfig, out_dir: impl AsRef<Path>) -> Result<SweepOutput> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let out = run_sweep_in_memory(cfg)?;
    write_metrics_csv(dir.join("metrics.csv"), &out.records)?;
    write_attack_csv(dir.join("attack.csv"), &out.attack)?;
    save_distribution(dir.join("task.json"), &InputDistribution::Mixture(out.task.mixture.clone()))?;
    for ck in &out.checkpoints {
        let mut b = network_to_bundle(&Network::Mlp(ck.net.clone()));
        b.tensors.push(Tensor::scalar("step", ck.step as f64));
        b.write(checkpoint_path(dir, ck.step))?;
    }
    Ok(out)
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("checkpoint_{step:06}.bin"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(d: usize, classes: usize) -> TaskConfig {
        TaskConfig { d, classes, train_size: 0, seed: 7, separation: 1.5, cov_condition: 10.0 }
    }

    #[test]
    fn simplex_is_regular_and_centered() {
        for m in 2..6 {
            let v = simplex_vertices(m);
            assert!(v.column_sum().amax() < 1e-12);
            for i in 0..m {
                assert!((v.column(i).norm() - 1.0).abs() < 1e-12);
                for j in i + 1..m {
                    // unit-radius regular simplex: ⟨v_i, v_j⟩ = −1/(m−1)
                    assert!((v.column(i).dot(&v.column(j)) + 1.0 / (m as f64 - 1.0)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn task_structure() {
        let t = synthetic_task(&cfg(8, 4)).unwrap();
        let s = &t.signal_basis;
        assert!((s.transpose() * s - DMatrix::identity(3, 3)).amax() < 1e-12);
        let proj_out = DMatrix::identity(8, 8) - s * s.transpose();
        for g in t.mixture.components() {
            assert!((g.mean().norm() - 1.5).abs() < 1e-12);
            assert!((&proj_out * g.mean()).amax() < 1e-12);
            // identity on the complement, no cross terms
            assert!((&proj_out * g.cov() * &proj_out - &proj_out).amax() < 1e-12);
            let inner = s.transpose() * g.cov() * s;
            let eig = inner.symmetric_eigenvalues();
            assert!(eig.max() / eig.min() <= 10.0 + 1e-9);
        }
        assert_eq!(synthetic_task(&cfg(8, 4)).unwrap(), t);
        assert!(synthetic_task(&cfg(2, 4)).is_err());
        assert!(synthetic_task(&cfg(65, 2)).is_err());
    }

    #[test]
    fn checkpoint_schedule() {
        assert_eq!(power_of_two_checkpoints(8), vec![0, 1, 2, 4, 8]);
        assert_eq!(power_of_two_checkpoints(10), vec![0, 1, 2, 4, 8, 10]);
        assert_eq!(power_of_two_checkpoints(0), vec![0]);
    }

    #[test]
    fn fit_mixture_edge_cases() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 7.0]);
        let single = fit_mixture_from_data(&x, &[0, 0, 0]).unwrap();
        assert_eq!(single.weights(), &[1.0]);
        assert!((single.components()[0].mean() - DVector::from_vec(vec![3.0, 13.0 / 3.0])).amax() < 1e-12);
        // one sample per class: shrinkage of a zero covariance falls back to τ·I
        let distinct = fit_mixture_from_data(&x, &[0, 1, 2]).unwrap();
        for g in distinct.components() {
            assert!(g.cov().clone().cholesky().is_some());
        }
        assert!(fit_mixture_from_data(&x, &[0, 2, 2]).is_err());
        assert!(fit_mixture_from_data(&x, &[0, 1]).is_err());
    }

    #[test]
    fn train_config_validation() {
        let t = synthetic_task(&cfg(4, 2)).unwrap();
        let mut tc = TrainConfig {
            hidden: 4,
            batch: 8,
            steps: 4,
            step_size: 0.1,
            weight_decay: 0.0,
            momentum: 0.9,
            checkpoint_steps: vec![0, 4],
            seed: 1,
        };
        assert_eq!(train_mlp(&t, &tc).unwrap().len(), 2);
        tc.checkpoint_steps = vec![0, 5];
        assert!(train_mlp(&t, &tc).is_err());
        tc.checkpoint_steps = vec![2, 2];
        assert!(train_mlp(&t, &tc).is_err());
        tc.checkpoint_steps = vec![0];
        tc.momentum = 1.0;
        assert!(train_mlp(&t, &tc).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Params::init(&mut rng, 3, 5, 4);
        let x = DMatrix::from_fn(6, 3, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let y = vec![0, 1, 2, 3, 1, 0];
        let (_, g) = p.loss_and_grad(&x, &y);
        let h = 1e-6;
        for (r, c) in [(0, 0), (2, 1), (4, 2)] {
            let mut plus = Params { w1: p.w1.clone(), b1: p.b1.clone(), w2: p.w2.clone(), b2: p.b2.clone() };
            plus.w1[(r, c)] += h;
            let mut minus = Params { w1: p.w1.clone(), b1: p.b1.clone(), w2: p.w2.clone(), b2: p.b2.clone() };
            minus.w1[(r, c)] -= h;
            let fd = (plus.loss_and_grad(&x, &y).0 - minus.loss_and_grad(&x, &y).0) / (2.0 * h);
            assert!((fd - g.w1[(r, c)]).abs() < 1e-6, "w1 {r},{c}: {fd} vs {}", g.w1[(r, c)]);
        }
        for (r, c) in [(0, 0), (3, 4)] {
            let mut plus = Params { w1: p.w1.clone(), b1: p.b1.clone(), w2: p.w2.clone(), b2: p.b2.clone() };
            plus.w2[(r, c)] += h;
            let mut minus = Params { w1: p.w1.clone(), b1: p.b1.clone(), w2: p.w2.clone(), b2: p.b2.clone() };
            minus.w2[(r, c)] -= h;
            let fd = (plus.loss_and_grad(&x, &y).0 - minus.loss_and_grad(&x, &y).0) / (2.0 * h);
            assert!((fd - g.w2[(r, c)]).abs() < 1e-6);
        }
    }

    #[test]
    fn config_json_round_trip() {
        let c = SweepConfig {
            task: cfg(4, 2),
            train: TrainConfig {
                hidden: 3,
                batch: 2,
                steps: 1,
                step_size: 0.1,
                weight_decay: 0.0,
                momentum: 0.9,
                checkpoint_steps: vec![0, 1],
                seed: 0,
            },
            eval: EvalSettings { n: 1000, seed: 1 },
            attack: EvalSettings { n: 1000, seed: 2 },
            fit: SweepFitConfig::default(),
        };
        let back: SweepConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
