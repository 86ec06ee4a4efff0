//! Functional networks: feature extractor, task net and metric-embedding net.
//!
//! Networks hold no state. Each forward function takes the [`ParamSet`] to
//! apply, so an inner-updated copy of the parameters can be used alongside
//! the originals without mutating either.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Expr, GradMap, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 5] = b"MASF1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetRole {
    FeatureExtractor,
    TaskNet,
    MetricNet,
}

impl NetRole {
    /// Short tag used in checkpoint file names.
    pub fn tag(self) -> &'static str {
        match self {
            NetRole::FeatureExtractor => "psi",
            NetRole::TaskNet => "theta",
            NetRole::MetricNet => "phi",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub input_dim: usize,
    pub feature_widths: Vec<usize>,
    pub num_classes: usize,
    pub metric_widths: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { input_dim: 16, feature_widths: vec![64, 32], num_classes: 5, metric_widths: vec![32, 16] }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let widths = self.feature_widths.iter().chain(&self.metric_widths);
        if self.input_dim == 0 || widths.clone().any(|&w| w == 0) {
            return Err(Error::config("all layer widths must be >= 1"));
        }
        if self.feature_widths.is_empty() || self.metric_widths.len() != 2 {
            return Err(Error::config("need >= 1 feature layer and exactly 2 metric layers"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        Ok(())
    }

    /// Width of the feature space Z.
    pub fn feature_dim(&self) -> usize {
        *self.feature_widths.last().unwrap_or(&self.input_dim)
    }

    pub fn embedding_dim(&self) -> usize {
        *self.metric_widths.last().unwrap_or(&self.feature_dim())
    }

    /// Layer-width chain of the network with the given role.
    pub fn dims(&self, role: NetRole) -> Vec<usize> {
        let mut dims = match role {
            NetRole::FeatureExtractor => vec![self.input_dim],
            NetRole::TaskNet => vec![self.feature_dim()],
            NetRole::MetricNet => vec![self.feature_dim()],
        };
        match role {
            NetRole::FeatureExtractor => dims.extend(&self.feature_widths),
            NetRole::TaskNet => dims.push(self.num_classes),
            NetRole::MetricNet => dims.extend(&self.metric_widths),
        }
        dims
    }
}

/// Named, ordered parameter tensors of one network.
#[derive(Clone, Debug)]
pub struct ParamSet {
    role: NetRole,
    entries: Vec<(String, Expr)>,
}

impl ParamSet {
    pub fn new(role: NetRole, entries: Vec<(String, Expr)>) -> Result<Self> {
        for (i, (name, _)) in entries.iter().enumerate() {
            if entries[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::config(format!("duplicate parameter name {name}")));
            }
        }
        Ok(Self { role, entries })
    }

    /// A zero-initialized MLP parameter set for a width chain.
    pub fn zeros(role: NetRole, dims: &[usize]) -> Self {
        let entries = dims
            .windows(2)
            .enumerate()
            .flat_map(|(i, w)| {
                [
                    (format!("fc{i}.weight"), Expr::zeros(&[w[0], w[1]])),
                    (format!("fc{i}.bias"), Expr::zeros(&[w[1]])),
                ]
            })
            .collect();
        Self { role, entries }
    }

    pub fn role(&self) -> NetRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Expr> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn exprs(&self) -> Vec<Expr> {
        self.entries.iter().map(|(_, e)| e.clone()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Expr)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), e))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, e)| e.value().numel()).sum()
    }

    /// Layer-width chain read off the weight shapes.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = Vec::new();
        for (name, e) in &self.entries {
            if name.ends_with(".weight") {
                if dims.is_empty() {
                    dims.push(e.shape()[0]);
                }
                dims.push(e.shape()[1]);
            }
        }
        dims
    }

    /// New leaves holding the current values; cuts all graph history.
    pub fn detach(&self) -> Self {
        let entries = self.entries.iter().map(|(n, e)| (n.clone(), e.detach())).collect();
        Self { role: self.role, entries }
    }

    /// Same names and shapes, new leaf values.
    pub fn with_values(&self, values: Vec<Tensor>) -> Result<Self> {
        if values.len() != self.entries.len() {
            return Err(Error::data(format!("expected {} tensors, got {}", self.entries.len(), values.len())));
        }
        let mut entries = Vec::with_capacity(values.len());
        for ((name, old), v) in self.entries.iter().zip(values) {
            if old.shape() != v.shape() {
                return Err(Error::data(format!("{name}: shape {:?} != {:?}", v.shape(), old.shape())));
            }
            entries.push((name.clone(), Expr::leaf(v)));
        }
        Ok(Self { role: self.role, entries })
    }

    /// `self + delta` entrywise, keeping graph history.
    pub fn replace(&self, deltas: &[Expr]) -> Result<Self> {
        if deltas.len() != self.entries.len() {
            return Err(Error::data("delta count does not match parameter count"));
        }
        let entries = self
            .entries
            .iter()
            .zip(deltas)
            .map(|((n, e), d)| Ok((n.clone(), e.add(d)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { role: self.role, entries })
    }

    /// Euclidean distance between the flattened values of two sets.
    pub fn distance(&self, other: &ParamSet) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .flat_map(|((_, a), (_, b))| a.value().data().iter().zip(b.value().data()).map(|(x, y)| (x - y).powi(2)))
            .sum::<f64>()
            .sqrt()
    }

    fn layers(&self) -> Result<Vec<(&Expr, &Expr)>> {
        let mut out = Vec::new();
        for i in 0.. {
            match (self.get(&format!("fc{i}.weight")), self.get(&format!("fc{i}.bias"))) {
                (Some(w), Some(b)) => out.push((w, b)),
                (None, None) => break,
                _ => return Err(Error::data(format!("layer fc{i} incomplete"))),
            }
        }
        Ok(out)
    }
}

fn expect_role(params: &ParamSet, role: NetRole) -> Result<()> {
    if params.role != role {
        return Err(Error::config(format!("expected {role:?} parameters, got {:?}", params.role)));
    }
    Ok(())
}

fn linear(x: &Expr, w: &Expr, b: &Expr) -> Result<Expr> {
    Ok(x.matmul(w)?.add(b)?)
}

/// Draws He-initialized weights and zero biases for all three networks.
pub fn init_params(arch: &Architecture, seed: u64) -> Result<(ParamSet, ParamSet, ParamSet)> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut build = |role: NetRole| -> ParamSet {
        let dims = arch.dims(role);
        let mut entries = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let data = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect();
            let weight = Tensor::new(vec![fan_in, fan_out], data).expect("sized");
            entries.push((format!("fc{i}.weight"), Expr::leaf(weight)));
            entries.push((format!("fc{i}.bias"), Expr::zeros(&[fan_out])));
        }
        ParamSet { role, entries }
    };
    let psi = build(NetRole::FeatureExtractor);
    let theta = build(NetRole::TaskNet);
    let phi = build(NetRole::MetricNet);
    Ok((psi, theta, phi))
}

/// `F_psi`: MLP with ReLU after every layer, so features are nonnegative.
pub fn feature_forward(psi: &ParamSet, x: &Expr) -> Result<Expr> {
    expect_role(psi, NetRole::FeatureExtractor)?;
    let mut h = x.clone();
    for (w, b) in psi.layers()? {
        h = linear(&h, w, b)?.relu();
    }
    Ok(h)
}

/// `T_theta`: a single affine layer producing unnormalized logits.
pub fn task_forward(theta: &ParamSet, z: &Expr) -> Result<Expr> {
    expect_role(theta, NetRole::TaskNet)?;
    let layers = theta.layers()?;
    let mut h = z.clone();
    for (i, (w, b)) in layers.iter().enumerate() {
        h = linear(&h, w, b)?;
        if i + 1 < layers.len() {
            h = h.relu();
        }
    }
    Ok(h)
}

/// `M_phi`: linear -> ReLU -> linear, then each row scaled to unit L2 norm.
pub fn metric_forward(phi: &ParamSet, z: &Expr) -> Result<Expr> {
    expect_role(phi, NetRole::MetricNet)?;
    let layers = phi.layers()?;
    let mut h = z.clone();
    for (i, (w, b)) in layers.iter().enumerate() {
        h = linear(&h, w, b)?;
        if i + 1 < layers.len() {
            h = h.relu();
        }
    }
    l2_normalize_rows(&h)
}

/// Scales each row to unit norm; the norm is epsilon-guarded by the division.
pub fn l2_normalize_rows(h: &Expr) -> Result<Expr> {
    let norms = h.square().sum_axis(1)?.sqrt()?.unsqueeze_last()?;
    Ok(h.div(&norms)?)
}

/// One plain gradient-descent step `p - lr * g` per entry.
///
/// The result keeps its graph history, so losses evaluated with it can be
/// differentiated back to the original `params`.
pub fn sgd_step(params: &ParamSet, grads: &GradMap, lr: f64) -> Result<ParamSet> {
    let entries = params
        .entries
        .iter()
        .map(|(name, p)| {
            let g = grads
                .get(p)
                .ok_or_else(|| Error::data(format!("missing gradient for {name}")))?;
            Ok((name.clone(), p.sub(&g.scale(lr))?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ParamSet { role: params.role, entries })
}

/// Writes `MASF1`, the dim count and dims as `u32` LE, then every
/// parameter value as `f64` LE in entry order.
pub fn write_params(path: &Path, params: &ParamSet) -> Result<()> {
    let dims = params.dims();
    let mut buf = Vec::with_capacity(5 + 4 * (dims.len() + 1) + 8 * params.num_scalars());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in &dims {
        buf.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for (_, e) in &params.entries {
        for v in e.value().data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_params(path: &Path, role: NetRole) -> Result<ParamSet> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_params(&bytes, role)
}

fn decode_params(bytes: &[u8], role: NetRole) -> Result<ParamSet> {
    let bad = |msg: &str| Error::Format(msg.to_string());
    if bytes.len() < 9 || &bytes[..5] != MAGIC {
        return Err(bad("missing MASF1 header"));
    }
    let u32_at = |off: usize| -> Result<usize> {
        let raw = bytes.get(off..off + 4).ok_or_else(|| bad("truncated header"))?;
        Ok(u32::from_le_bytes(raw.try_into().unwrap()) as usize)
    };
    let n_dims = u32_at(5)?;
    let dims = (0..n_dims).map(|i| u32_at(9 + 4 * i)).collect::<Result<Vec<_>>>()?;
    if dims.len() < 2 {
        return Err(bad("need at least two dims"));
    }
    let template = ParamSet::zeros(role, &dims);
    let mut offset = 9 + 4 * n_dims;
    if bytes.len() != offset + 8 * template.num_scalars() {
        return Err(bad("payload length does not match dims"));
    }
    let mut values = Vec::with_capacity(template.len());
    for (_, e) in &template.entries {
        let n = e.value().numel();
        let data = bytes[offset..offset + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += 8 * n;
        values.push(Tensor::new(e.shape().to_vec(), data)?);
    }
    template.with_values(values)
}
