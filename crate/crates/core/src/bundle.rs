//! Tensor-bundle files and the (de)serialization of networks, approximants
//! and input distributions.
//!
//! Layout: 8-byte magic `PLYAPX01`, little-endian `u32` manifest length, a
//! UTF-8 JSON manifest `[{name, dtype, shape, offset}]`, then the payload.
//! Offsets are relative to the start of the payload; tensors are row-major
//! little-endian. `f64` is written; `f32` is accepted on read and widened.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::actint::Activation;
use crate::approx::{Approximant, GluSpec, LinearApproximant, MlpSpec, Network, QuadraticApproximant};
use crate::error::{Error, Result};
use crate::gauss::{Gaussian, GaussianMixture, InputDistribution};

pub const MAGIC: &[u8; 8] = b"PLYAPX01";
const HEADER_LEN: u64 = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    /// Row-major.
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::invalid(format!("tensor {name}: shape {shape:?} does not hold {} values", data.len())));
        }
        Ok(Self { name: name.to_string(), shape, data })
    }

    pub fn scalar(name: &str, v: f64) -> Self {
        Self { name: name.to_string(), shape: vec![], data: vec![v] }
    }

    pub fn vector(name: &str, v: &DVector<f64>) -> Self {
        Self { name: name.to_string(), shape: vec![v.len()], data: v.as_slice().to_vec() }
    }

    pub fn matrix(name: &str, m: &DMatrix<f64>) -> Self {
        let data = m.transpose().as_slice().to_vec();
        Self { name: name.to_string(), shape: vec![m.nrows(), m.ncols()], data }
    }

    /// Stacks equally shaped matrices into a `[len, rows, cols]` tensor.
    pub fn stack(name: &str, ms: &[DMatrix<f64>], rows: usize, cols: usize) -> Self {
        let data = ms.iter().flat_map(|m| m.transpose().as_slice().to_vec()).collect();
        Self { name: name.to_string(), shape: vec![ms.len(), rows, cols], data }
    }

    pub fn as_scalar(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::invalid(format!("tensor {} is not a scalar (shape {:?})", self.name, self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn as_vector(&self) -> Result<DVector<f64>> {
        if self.shape.len() != 1 {
            return Err(Error::invalid(format!("tensor {} is not a vector (shape {:?})", self.name, self.shape)));
        }
        Ok(DVector::from_column_slice(&self.data))
    }

    pub fn as_matrix(&self) -> Result<DMatrix<f64>> {
        if self.shape.len() != 2 {
            return Err(Error::invalid(format!("tensor {} is not a matrix (shape {:?})", self.name, self.shape)));
        }
        Ok(DMatrix::from_row_slice(self.shape[0], self.shape[1], &self.data))
    }

    pub fn as_stack(&self) -> Result<Vec<DMatrix<f64>>> {
        if self.shape.len() != 3 {
            return Err(Error::invalid(format!("tensor {} is not a 3-d stack (shape {:?})", self.name, self.shape)));
        }
        let (r, c) = (self.shape[1], self.shape[2]);
        Ok(self.data.chunks(r * c.max(1)).take(self.shape[0]).map(|s| DMatrix::from_row_slice(r, c, s)).collect())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorBundle {
    pub tensors: Vec<Tensor>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

fn format_err(offset: u64, msg: impl Into<String>) -> Error {
    Error::Format { offset, msg: msg.into() }
}

impl TensorBundle {
    pub fn new(tensors: Vec<Tensor>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::invalid(format!("bundle has no tensor named {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut seen = HashSet::new();
        let mut manifest = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for t in &self.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(Error::invalid(format!("duplicate tensor name {:?}", t.name)));
            }
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::invalid(format!("tensor {}: shape/data length mismatch", t.name)));
            }
            manifest.push(ManifestEntry { name: t.name.clone(), dtype: "f64".into(), shape: t.shape.clone(), offset });
            offset += 8 * t.data.len() as u64;
        }
        let json = serde_json::to_vec(&manifest)?;
        let len = u32::try_from(json.len()).map_err(|_| Error::invalid("manifest too large"))?;
        let mut out = Vec::with_capacity(HEADER_LEN as usize + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(format_err(0, "bad magic; expected PLYAPX01"));
        }
        if bytes.len() < HEADER_LEN as usize {
            return Err(format_err(8, format!("truncated header: expected {HEADER_LEN} bytes, found {}", bytes.len())));
        }
        let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as u64;
        let blob_start = HEADER_LEN + mlen;
        if (bytes.len() as u64) < blob_start {
            return Err(format_err(
                HEADER_LEN,
                format!("truncated manifest: expected {blob_start} bytes, found {}", bytes.len()),
            ));
        }
        let manifest: Vec<ManifestEntry> = serde_json::from_slice(&bytes[HEADER_LEN as usize..blob_start as usize])
            .map_err(|e| format_err(HEADER_LEN, format!("manifest is not valid JSON: {e}")))?;
        let blob = &bytes[blob_start as usize..];

        let mut names = HashSet::new();
        let mut spans = Vec::with_capacity(manifest.len());
        let mut expected = 0u64;
        for (i, e) in manifest.iter().enumerate() {
            if !names.insert(e.name.as_str()) {
                return Err(format_err(HEADER_LEN, format!("duplicate tensor name {:?}", e.name)));
            }
            let width = match e.dtype.as_str() {
                "f64" => 8u64,
                "f32" => 4,
                other => return Err(format_err(HEADER_LEN, format!("tensor {:?}: unsupported dtype {other:?}", e.name))),
            };
            let count: u64 = e.shape.iter().map(|&s| s as u64).product();
            let end = e.offset + count * width;
            spans.push((e.offset, end, i));
            expected += count * width;
        }
        if (blob.len() as u64) < expected {
            return Err(format_err(
                blob_start + blob.len() as u64,
                format!("truncated payload: expected {} bytes, found {}", blob_start + expected, bytes.len()),
            ));
        }
        if blob.len() as u64 != expected {
            return Err(format_err(
                blob_start + expected,
                format!("payload length {} does not match the manifest total {expected}", blob.len()),
            ));
        }
        let mut sorted = spans.clone();
        sorted.sort();
        for w in sorted.windows(2) {
            if w[1].0 < w[0].1 {
                let (a, b) = (&manifest[w[0].2].name, &manifest[w[1].2].name);
                return Err(format_err(blob_start + w[1].0, format!("tensors {a:?} and {b:?} overlap")));
            }
        }
        for &(start, end, i) in &spans {
            if end > blob.len() as u64 {
                let name = &manifest[i].name;
                return Err(format_err(blob_start + start, format!("tensor {name:?} runs past the end of the payload")));
            }
        }

        let tensors = manifest
            .into_iter()
            .zip(spans)
            .map(|(e, (start, end, _))| {
                let raw = &blob[start as usize..end as usize];
                let data = if e.dtype == "f64" {
                    raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
                } else {
                    raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
                };
                Tensor { name: e.name, shape: e.shape, data }
            })
            .collect();
        Ok(Self { tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn bundle_write(path: impl AsRef<Path>, tensors: &TensorBundle) -> Result<()> {
    tensors.write(path)
}

pub fn bundle_read(path: impl AsRef<Path>) -> Result<TensorBundle> {
    TensorBundle::read(path)
}

fn activation_tensor(act: Activation) -> Tensor {
    Tensor::scalar("activation", f64::from(act.code()))
}

fn activation_of(b: &TensorBundle) -> Result<Activation> {
    let code = b.require("activation")?.as_scalar()?;
    if code.fract() != 0.0 || !(0.0..=255.0).contains(&code) {
        return Err(Error::invalid(format!("activation code {code} is not an integer code")));
    }
    Activation::from_code(code as u8)
}

pub fn network_to_bundle(net: &Network) -> TensorBundle {
    let mut t = match net {
        Network::Mlp(m) => vec![
            Tensor::matrix("w1", &m.w1),
            Tensor::vector("b1", &m.b1),
            Tensor::matrix("w2", &m.w2),
            Tensor::vector("b2", &m.b2),
            activation_tensor(m.act),
        ],
        Network::Glu(g) => {
            let mut t = vec![
                Tensor::matrix("w", &g.w),
                Tensor::matrix("v", &g.v),
                Tensor::vector("b", &g.b),
                Tensor::vector("c", &g.c),
                activation_tensor(g.act),
            ];
            if let Some(o) = &g.out {
                t.push(Tensor::matrix("out", o));
            }
            t
        }
    };
    t.shrink_to_fit();
    TensorBundle::new(t)
}

/// MLP bundles carry `w1`; GLU bundles carry `w` and `v`.
pub fn network_from_bundle(b: &TensorBundle) -> Result<Network> {
    if b.get("w1").is_some() {
        let net = MlpSpec::new(
            b.require("w1")?.as_matrix()?,
            b.require("b1")?.as_vector()?,
            b.require("w2")?.as_matrix()?,
            b.require("b2")?.as_vector()?,
            activation_of(b)?,
        )?;
        Ok(Network::Mlp(net))
    } else if b.get("w").is_some() {
        let out = b.get("out").map(|t| t.as_matrix()).transpose()?;
        let net = GluSpec::new(
            b.require("w")?.as_matrix()?,
            b.require("v")?.as_matrix()?,
            b.require("b")?.as_vector()?,
            b.require("c")?.as_vector()?,
            out,
            activation_of(b)?,
        )?;
        Ok(Network::Glu(net))
    } else {
        Err(Error::invalid("bundle holds neither an MLP (w1, …) nor a GLU (w, v, …)"))
    }
}

pub fn approximant_to_bundle(a: &Approximant) -> TensorBundle {
    match a {
        Approximant::Linear(l) => TensorBundle::new(vec![
            Tensor::vector("alpha", &l.alpha),
            Tensor::matrix("beta", &l.beta),
            Tensor::scalar("ridge", l.ridge),
        ]),
        Approximant::Quadratic(q) => {
            let d = q.input_dim();
            TensorBundle::new(vec![
                Tensor::vector("gamma", &q.gamma),
                Tensor::matrix("beta", &q.beta),
                Tensor::stack("q", &q.q, d, d),
                Tensor::scalar("ridge", q.ridge),
            ])
        }
    }
}

/// Linear bundles carry `alpha`; quadratic bundles carry `gamma` and `q`.
pub fn approximant_from_bundle(b: &TensorBundle) -> Result<Approximant> {
    let ridge = b.get("ridge").map(|t| t.as_scalar()).transpose()?.unwrap_or(0.0);
    let beta = b.require("beta")?.as_matrix()?;
    if let Some(alpha) = b.get("alpha") {
        let alpha = alpha.as_vector()?;
        if alpha.len() != beta.ncols() {
            return Err(Error::invalid("linear approximant: alpha length differs from beta columns"));
        }
        return Ok(Approximant::Linear(LinearApproximant { alpha, beta, ridge }));
    }
    let gamma = b.require("gamma")?.as_vector()?;
    let q = b.require("q")?.as_stack()?;
    let d = beta.nrows();
    if gamma.len() != beta.ncols() || q.len() != gamma.len() || q.iter().any(|m| m.shape() != (d, d)) {
        return Err(Error::invalid("quadratic approximant: gamma/beta/q shapes disagree"));
    }
    Ok(Approximant::Quadratic(QuadraticApproximant { gamma, beta, q, ridge }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ComponentJson {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum DistributionJson {
    Gaussian { mean: Vec<f64>, cov: Vec<Vec<f64>> },
    Mixture { weights: Vec<f64>, components: Vec<ComponentJson> },
}

fn gaussian_from_rows(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> Result<Gaussian> {
    let d = mean.len();
    if cov.len() != d || cov.iter().any(|r| r.len() != d) {
        return Err(Error::invalid(format!("covariance must be {d}×{d}")));
    }
    let flat: Vec<f64> = cov.into_iter().flatten().collect();
    Gaussian::new(DVector::from_vec(mean), DMatrix::from_row_slice(d, d, &flat))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn distribution_to_json(dist: &InputDistribution) -> Result<String> {
    let repr = match dist {
        InputDistribution::Gaussian(g) => {
            DistributionJson::Gaussian { mean: g.mean().as_slice().to_vec(), cov: rows_of(g.cov()) }
        }
        InputDistribution::Mixture(m) => DistributionJson::Mixture {
            weights: m.weights().to_vec(),
            components: m
                .components()
                .iter()
                .map(|g| ComponentJson { mean: g.mean().as_slice().to_vec(), cov: rows_of(g.cov()) })
                .collect(),
        },
    };
    Ok(serde_json::to_string_pretty(&repr)?)
}

pub fn distribution_from_json(text: &str) -> Result<InputDistribution> {
    Ok(match serde_json::from_str::<DistributionJson>(text)? {
        DistributionJson::Gaussian { mean, cov } => InputDistribution::Gaussian(gaussian_from_rows(mean, cov)?),
        DistributionJson::Mixture { weights, components } => {
            let comps = components.into_iter().map(|c| gaussian_from_rows(c.mean, c.cov)).collect::<Result<Vec<_>>>()?;
            InputDistribution::Mixture(GaussianMixture::new(weights, comps)?)
        }
    })
}

/// `weights [m]`, `means [m, d]`, `covs [m, d, d]`.
pub fn distribution_to_bundle(dist: &InputDistribution) -> TensorBundle {
    let mix = dist.clone().into_mixture();
    let d = mix.dim();
    let means: Vec<f64> = mix.components().iter().flat_map(|g| g.mean().as_slice().to_vec()).collect();
    let covs: Vec<DMatrix<f64>> = mix.components().iter().map(|g| g.cov().clone()).collect();
    TensorBundle::new(vec![
        Tensor::vector("weights", &DVector::from_column_slice(mix.weights())),
        Tensor { name: "means".into(), shape: vec![mix.components().len(), d], data: means },
        Tensor::stack("covs", &covs, d, d),
    ])
}

pub fn distribution_from_bundle(b: &TensorBundle) -> Result<InputDistribution> {
    let weights = b.require("weights")?.as_vector()?;
    let means = b.require("means")?.as_matrix()?;
    let covs = b.require("covs")?.as_stack()?;
    if means.nrows() != weights.len() || covs.len() != weights.len() {
        return Err(Error::invalid("distribution bundle: weights/means/covs counts differ"));
    }
    let comps = covs
        .into_iter()
        .enumerate()
        .map(|(i, c)| Gaussian::new(means.row(i).transpose(), c))
        .collect::<Result<Vec<_>>>()?;
    let mix = GaussianMixture::new(weights.as_slice().to_vec(), comps)?;
    Ok(if mix.components().len() == 1 {
        InputDistribution::Gaussian(mix.components()[0].clone())
    } else {
        InputDistribution::Mixture(mix)
    })
}

/// JSON when the extension is `.json`, tensor bundle otherwise.
pub fn load_distribution(path: impl AsRef<Path>) -> Result<InputDistribution> {
    let path = path.as_ref();
    if is_json(path) {
        distribution_from_json(&std::fs::read_to_string(path)?)
    } else {
        distribution_from_bundle(&TensorBundle::read(path)?)
    }
}

pub fn save_distribution(path: impl AsRef<Path>, dist: &InputDistribution) -> Result<()> {
    let path = path.as_ref();
    if is_json(path) {
        std::fs::write(path, distribution_to_json(dist)?)?;
        Ok(())
    } else {
        distribution_to_bundle(dist).write(path)
    }
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}
