//! Evaluation diagnostics on trained parameters.

use rand::Rng;

use crate::autodiff::{Expr, Tensor};
use crate::bench::DomainDataset;
use crate::losses::{pair_alignment, SoftLabelMatrix};
use crate::nets::{feature_forward, metric_forward, task_forward, ParamSet};
use crate::{Error, Result};

/// Fraction of samples whose argmax logit (lowest index on ties) is the label.
pub fn evaluate_accuracy(psi: &ParamSet, theta: &ParamSet, dataset: &DomainDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::data("accuracy of an empty dataset"));
    }
    let logits = task_forward(theta, &feature_forward(psi, &Expr::leaf(dataset.features.clone()))?)?;
    let logits = logits.value();
    let correct = (0..dataset.len())
        .filter(|&i| {
            let row = logits.row(i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == dataset.labels[i]
        })
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Metric-net embeddings of a dataset.
pub fn embed(psi: &ParamSet, phi: &ParamSet, dataset: &DomainDataset) -> Result<Tensor> {
    let z = feature_forward(psi, &Expr::leaf(dataset.features.clone()))?;
    Ok(metric_forward(phi, &z)?.value().clone())
}

/// Monte-Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
}

impl Estimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = if samples.len() > 1 { samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Self { mean, std_err: (var / n).sqrt() }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Margin statistic on precomputed embeddings: anchors from `a`, positives
/// and negatives from `b`; averages `d(anchor, negative) - d(anchor, positive)`.
///
/// Pass `same_domain = true` when `a` and `b` are the same samples so an
/// anchor is never its own positive.
pub fn margin_from_embeddings<R: Rng + ?Sized>(
    emb_a: &Tensor,
    labels_a: &[usize],
    emb_b: &Tensor,
    labels_b: &[usize],
    same_domain: bool,
    n_pairs: usize,
    rng: &mut R,
) -> Result<Estimate> {
    let distinct = |labels: &[usize]| {
        let mut l = labels.to_vec();
        l.sort_unstable();
        l.dedup();
        l.len()
    };
    if distinct(labels_a) < 2 || distinct(labels_b) < 2 || n_pairs == 0 {
        return Err(Error::data("margin statistic needs >= 2 classes in each domain and >= 1 draw"));
    }
    let mut samples = Vec::with_capacity(n_pairs);
    let mut attempts = 0usize;
    while samples.len() < n_pairs {
        attempts += 1;
        if attempts > 100 * n_pairs {
            return Err(Error::data("could not draw positive pairs"));
        }
        let a = rng.random_range(0..labels_a.len());
        let y = labels_a[a];
        let positives: Vec<usize> = (0..labels_b.len()).filter(|&j| labels_b[j] == y && !(same_domain && j == a)).collect();
        let negatives: Vec<usize> = (0..labels_b.len()).filter(|&j| labels_b[j] != y).collect();
        if positives.is_empty() || negatives.is_empty() {
            continue;
        }
        let p = positives[rng.random_range(0..positives.len())];
        let n = negatives[rng.random_range(0..negatives.len())];
        let anchor = emb_a.row(a);
        samples.push(distance(anchor, emb_b.row(n)) - distance(anchor, emb_b.row(p)));
    }
    Ok(Estimate::from_samples(&samples))
}

/// Margin between negative- and positive-pair embedding distances across two domains.
pub fn margin_statistic<R: Rng + ?Sized>(
    psi: &ParamSet,
    phi: &ParamSet,
    domain_a: &DomainDataset,
    domain_b: &DomainDataset,
    n_pairs: usize,
    rng: &mut R,
) -> Result<Estimate> {
    let ea = embed(psi, phi, domain_a)?;
    let eb = embed(psi, phi, domain_b)?;
    let same = std::ptr::eq(domain_a, domain_b);
    margin_from_embeddings(&ea, &domain_a.labels, &eb, &domain_b.labels, same, n_pairs, rng)
}

/// Class-alignment loss between a source and a target domain under `(psi, theta)`.
pub fn target_alignment(psi: &ParamSet, theta: &ParamSet, source: &DomainDataset, target: &DomainDataset, tau: f64) -> Result<f64> {
    let c = source.num_classes;
    let a = SoftLabelMatrix::for_batch(psi, theta, &source.as_batch(), c, tau)?;
    let b = SoftLabelMatrix::for_batch(psi, theta, &target.as_batch(), c, tau)?;
    Ok(pair_alignment(&a, &b)?.item())
}

/// Mean silhouette coefficient of labeled points.
///
/// Samples in singleton classes score 0, as does `0 / 0`.
pub fn silhouette_score(points: &Tensor, labels: &[usize]) -> Result<f64> {
    let n = labels.len();
    if points.rank() != 2 || points.shape()[0] != n || n == 0 {
        return Err(Error::data("silhouette needs one point per label"));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; num_classes];
    for &y in labels {
        sizes[y] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::data("silhouette needs at least two classes"));
    }
    let mut total = 0.0;
    for i in 0..n {
        if sizes[labels[i]] < 2 {
            continue;
        }
        let mut sums = vec![0.0; num_classes];
        for j in 0..n {
            if j != i {
                sums[labels[j]] += distance(points.row(i), points.row(j));
            }
        }
        let a = sums[labels[i]] / (sizes[labels[i]] - 1) as f64;
        let b = (0..num_classes)
            .filter(|&c| c != labels[i] && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}
