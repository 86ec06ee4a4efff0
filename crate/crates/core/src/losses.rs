//! Task, global-alignment and local metric-learning losses.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Expr, Tensor};
use crate::bench::Batch;
use crate::nets::{feature_forward, task_forward, ParamSet};
use crate::{Error, Result};

/// Default softmax temperature for soft labels.
pub const DEFAULT_TEMPERATURE: f64 = 2.0;
/// Default distance margin for contrastive and triplet losses.
pub const DEFAULT_MARGIN: f64 = 1.0;

fn one_hot(labels: &[usize], num_classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::data(format!("label {y} out of range for {num_classes} classes")));
        }
        data[i * num_classes + y] = 1.0;
    }
    Ok(Tensor::new(vec![labels.len(), num_classes], data)?)
}

fn check_rows(x: &Expr, labels: &[usize], what: &str) -> Result<()> {
    if x.shape().len() != 2 || x.shape()[0] != labels.len() {
        return Err(Error::data(format!("{what}: shape {:?} vs {} labels", x.shape(), labels.len())));
    }
    Ok(())
}

/// Mean cross-entropy of `[N, C]` logits against integer labels.
pub fn task_loss(logits: &Expr, labels: &[usize]) -> Result<Expr> {
    check_rows(logits, labels, "task_loss")?;
    if labels.is_empty() {
        return Err(Error::data("task_loss on an empty batch"));
    }
    let picked_mask = Expr::leaf(one_hot(labels, logits.shape()[1])?);
    let picked = logits.mul(&picked_mask)?.sum_axis(1)?;
    let nll = logits.log_sum_exp()?.sub(&picked)?;
    Ok(nll.mean())
}

/// Per-class mean feature rows with a presence mask.
#[derive(Clone, Debug)]
pub struct ClassMeans {
    /// `[C, d]`; rows of absent classes are zero.
    pub means: Expr,
    pub present: Vec<bool>,
}

pub fn class_means(z: &Expr, labels: &[usize], num_classes: usize) -> Result<ClassMeans> {
    check_rows(z, labels, "class_means")?;
    if labels.is_empty() {
        return Err(Error::data("class_means on an empty batch"));
    }
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        if y >= num_classes {
            return Err(Error::data(format!("label {y} out of range for {num_classes} classes")));
        }
        counts[y] += 1;
    }
    let n = labels.len();
    let mut avg = vec![0.0; num_classes * n];
    for (i, &y) in labels.iter().enumerate() {
        avg[y * n + i] = 1.0 / counts[y] as f64;
    }
    let averaging = Expr::leaf(Tensor::new(vec![num_classes, n], avg)?);
    Ok(ClassMeans { means: averaging.matmul(z)?, present: counts.iter().map(|&c| c > 0).collect() })
}

/// Temperature-softened class distributions `softmax(T_theta(z) / tau)`,
/// one row per row of `features`.
pub fn soft_labels(theta: &ParamSet, features: &Expr, tau: f64) -> Result<Expr> {
    if !(tau > 0.0) {
        return Err(Error::config(format!("temperature {tau} must be > 0")));
    }
    let z = if features.shape().len() == 1 { features.reshape(&[1, features.shape()[0]])? } else { features.clone() };
    let logits = task_forward(theta, &z)?;
    let probs = logits.scale(1.0 / tau).softmax()?;
    if features.shape().len() == 1 {
        Ok(probs.reshape(&[probs.shape()[1]])?)
    } else {
        Ok(probs)
    }
}

/// Soft confusion matrix of one domain: row `c` is the softened prediction
/// for the mean feature of class `c`.
#[derive(Clone, Debug)]
pub struct SoftLabelMatrix {
    /// `[C, C]`; rows of absent classes are not meaningful.
    pub probs: Expr,
    pub present: Vec<bool>,
    pub temperature: f64,
}

impl SoftLabelMatrix {
    pub fn from_features(theta: &ParamSet, z: &Expr, labels: &[usize], num_classes: usize, tau: f64) -> Result<Self> {
        let means = class_means(z, labels, num_classes)?;
        let probs = soft_labels(theta, &means.means, tau)?;
        Ok(Self { probs, present: means.present, temperature: tau })
    }

    /// Builds the matrix for a batch under feature extractor `psi`.
    pub fn for_batch(psi: &ParamSet, theta: &ParamSet, batch: &Batch, num_classes: usize, tau: f64) -> Result<Self> {
        let z = feature_forward(psi, &Expr::leaf(batch.x.clone()))?;
        Self::from_features(theta, &z, &batch.labels, num_classes, tau)
    }
}

/// Row-wise symmetrized KL, `0.5 * sum (p - q)(ln p - ln q)`, for `[R, C]`.
fn symm_kl_rows(p: &Expr, q: &Expr) -> Result<Expr> {
    let log_ratio = p.ln()?.sub(&q.ln()?)?;
    Ok(p.sub(q)?.mul(&log_ratio)?.sum_axis(p.shape().len() - 1)?.scale(0.5))
}

fn check_distribution(p: &Expr, what: &str) -> Result<()> {
    if p.shape().len() != 1 || p.shape()[0] == 0 {
        return Err(Error::data(format!("{what}: expected a 1-D distribution, got {:?}", p.shape())));
    }
    let data = p.value().data();
    let sum: f64 = data.iter().sum();
    if data.iter().any(|&v| v < 0.0 || !v.is_finite()) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::data(format!("{what} is not a distribution (sum {sum})")));
    }
    Ok(())
}

/// Symmetrized KL divergence `0.5 [KL(p||q) + KL(q||p)]` of two distributions.
pub fn symm_kl(p: &Expr, q: &Expr) -> Result<Expr> {
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    if p.shape() != q.shape() {
        return Err(Error::data("distributions differ in length"));
    }
    symm_kl_rows(p, q)
}

/// Mean symmetrized KL over the classes present in both matrices.
pub fn pair_alignment(a: &SoftLabelMatrix, b: &SoftLabelMatrix) -> Result<Expr> {
    let shared: Vec<usize> = (0..a.present.len()).filter(|&c| a.present[c] && b.present.get(c) == Some(&true)).collect();
    if shared.is_empty() {
        return Err(Error::data("no class present in both domains"));
    }
    let rows = symm_kl_rows(&a.probs.gather(&shared)?, &b.probs.gather(&shared)?)?;
    Ok(rows.mean())
}

/// Average of [`pair_alignment`] over every (meta-train, meta-test) pair.
pub fn alignment_over_pairs(train: &[SoftLabelMatrix], test: &[SoftLabelMatrix]) -> Result<Expr> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::data("global alignment needs at least one domain on each side"));
    }
    let mut total = Expr::scalar(0.0);
    for a in train {
        for b in test {
            total = total.add(&pair_alignment(a, b)?)?;
        }
    }
    Ok(total.scale(1.0 / (train.len() * test.len()) as f64))
}

/// Global class-alignment loss between meta-train and meta-test batches
/// under the (typically inner-updated) parameters `psi`, `theta`.
pub fn global_alignment_loss(
    train: &[&Batch],
    test: &[&Batch],
    psi: &ParamSet,
    theta: &ParamSet,
    num_classes: usize,
    tau: f64,
) -> Result<Expr> {
    let build = |batches: &[&Batch]| -> Result<Vec<SoftLabelMatrix>> {
        batches.iter().map(|b| SoftLabelMatrix::for_batch(psi, theta, b, num_classes, tau)).collect()
    };
    alignment_over_pairs(&build(train)?, &build(test)?)
}

/// Local clustering loss selector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalLossKind {
    Contrastive,
    #[default]
    Triplet,
}

/// Euclidean distance between two embedding vectors of equal length.
pub fn pairwise_distance(a: &Expr, b: &Expr) -> Result<Expr> {
    if a.shape() != b.shape() {
        return Err(Error::data(format!("embedding shapes {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.sub(b)?.square().sum().sqrt()?)
}

/// Squared distances between rows `left[k]` and `right[k]` of `emb`, shape `[K]`.
fn row_sq_distances(emb: &Expr, left: &[usize], right: &[usize]) -> Result<Expr> {
    Ok(emb.gather(left)?.sub(&emb.gather(right)?)?.square().sum_axis(1)?)
}

/// All squared row distances `|e_i|^2 + |e_j|^2 - 2 e_i.e_j`, shape `[n, n]`.
fn sq_distance_matrix(emb: &Expr) -> Result<Expr> {
    let norms = emb.square().sum_axis(1)?;
    let gram = emb.matmul(&emb.transpose()?)?;
    Ok(norms.unsqueeze_last()?.add(&norms)?.sub(&gram.scale(2.0))?)
}

/// Two samples of a pooled batch and whether they share a class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairSample {
    pub first: usize,
    pub second: usize,
    pub same_class: bool,
}

/// Shuffle-then-pair: `floor(n / 2)` disjoint pairs from a random permutation.
pub fn shuffled_pairs<R: Rng + ?Sized>(labels: &[usize], rng: &mut R) -> Vec<PairSample> {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(rng);
    order
        .chunks_exact(2)
        .map(|c| PairSample { first: c[0], second: c[1], same_class: labels[c[0]] == labels[c[1]] })
        .collect()
}

/// Every unordered pair, for the exhaustive estimator.
pub fn all_pairs(labels: &[usize]) -> Vec<PairSample> {
    let n = labels.len();
    (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| PairSample { first: i, second: j, same_class: labels[i] == labels[j] })
        .collect()
}

/// Mean contrastive loss over explicit pairs: `d^2` for same-class pairs,
/// `max(0, margin - d)^2` otherwise.
pub fn contrastive_loss_on_pairs(emb: &Expr, pairs: &[PairSample], margin: f64) -> Result<Expr> {
    if pairs.is_empty() {
        return Err(Error::data("contrastive loss needs at least one pair"));
    }
    let split = |same: bool| -> (Vec<usize>, Vec<usize>) {
        pairs.iter().filter(|p| p.same_class == same).map(|p| (p.first, p.second)).unzip()
    };
    let mut total = Expr::scalar(0.0);
    let (a, b) = split(true);
    if !a.is_empty() {
        total = total.add(&row_sq_distances(emb, &a, &b)?.sum())?;
    }
    let (a, b) = split(false);
    if !a.is_empty() {
        let d = row_sq_distances(emb, &a, &b)?.sqrt()?;
        let hinge = Expr::scalar(margin).sub(&d)?.relu().square();
        total = total.add(&hinge.sum())?;
    }
    Ok(total.scale(1.0 / pairs.len() as f64))
}

/// Contrastive loss with the O(N) shuffled pairing.
pub fn contrastive_loss<R: Rng + ?Sized>(emb: &Expr, labels: &[usize], margin: f64, rng: &mut R) -> Result<Expr> {
    check_rows(emb, labels, "contrastive_loss")?;
    if labels.len() < 2 {
        return Err(Error::data("contrastive loss needs at least 2 samples"));
    }
    contrastive_loss_on_pairs(emb, &shuffled_pairs(labels, rng), margin)
}

/// Anchor, positive (same class) and negative (other class) indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TripletSample {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Online semi-hard mining over every ordered anchor-positive pair.
///
/// The negative is the closest one strictly farther than the positive; if
/// no negative is farther, the farthest negative is used. Ties go to the
/// lowest sample index.
pub fn mine_semihard(emb: &Tensor, labels: &[usize]) -> Vec<TripletSample> {
    let n = labels.len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            dist[i * n + j] = sq_dist(emb.row(i), emb.row(j));
        }
    }
    let mut triplets = Vec::new();
    let mut negatives: Vec<(f64, usize)> = Vec::with_capacity(n);
    for a in 0..n {
        // negatives by (distance, index): the semi-hard pick is the first
        // entry farther than the positive, the fallback the first of the
        // farthest block
        negatives.clear();
        negatives.extend((0..n).filter(|&m| labels[m] != labels[a]).map(|m| (dist[a * n + m], m)));
        if negatives.is_empty() {
            continue;
        }
        negatives.sort_unstable_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let d_max = negatives[negatives.len() - 1].0;
        let far = negatives[negatives.partition_point(|&(d, _)| d < d_max)].1;
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            let d_ap = dist[a * n + p];
            let k = negatives.partition_point(|&(d, _)| d <= d_ap);
            let negative = negatives.get(k).map_or(far, |&(_, m)| m);
            triplets.push(TripletSample { anchor: a, positive: p, negative });
        }
    }
    triplets
}

/// Mean of `max(0, d(a,p)^2 - d(a,n)^2 + margin)` over explicit triplets.
pub fn triplet_loss_on(emb: &Expr, triplets: &[TripletSample], margin: f64) -> Result<Expr> {
    if triplets.is_empty() {
        return Ok(Expr::scalar(0.0));
    }
    let n = emb.shape()[0];
    // triplets far outnumber rows, so read distances off the n x n matrix
    let dist = sq_distance_matrix(emb)?.reshape(&[n * n])?;
    let d_ap = dist.gather(&triplets.iter().map(|t| t.anchor * n + t.positive).collect::<Vec<_>>())?;
    let d_an = dist.gather(&triplets.iter().map(|t| t.anchor * n + t.negative).collect::<Vec<_>>())?;
    let hinge = d_ap.sub(&d_an)?.add(&Expr::scalar(margin))?.relu();
    Ok(hinge.mean())
}

/// Triplet loss with online semi-hard mining; zero (with a warning) when
/// the batch holds no valid triplet.
pub fn triplet_loss_semihard(emb: &Expr, labels: &[usize], margin: f64) -> Result<Expr> {
    check_rows(emb, labels, "triplet_loss")?;
    let triplets = mine_semihard(emb.value(), labels);
    if triplets.is_empty() {
        log::warn!("no valid triplet in a batch of {} samples", labels.len());
    }
    triplet_loss_on(emb, &triplets, margin)
}
