//! Synthetic multi-domain classification benchmark.
//!
//! All domains share one set of class-conditional Gaussian latents (the
//! domain-invariant semantic structure). Each domain then applies its own
//! transform: a rotation in a 2-D latent plane, a per-feature affine map, an
//! optional feature permutation and additive noise.

use std::path::Path;

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::{Error, Result};

/// Shared latent layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentSpec {
    pub input_dim: usize,
    pub num_classes: usize,
    /// Latent axes that domains rotate.
    #[serde(default = "default_plane")]
    pub rotation_plane: [usize; 2],
    /// Class centers sit on a circle of this radius inside the rotation plane.
    pub plane_radius: f64,
    /// Std of the Gaussian class centers on every other axis.
    pub center_scale: f64,
    /// Within-class latent std.
    pub within_class_sigma: f64,
}

fn default_plane() -> [usize; 2] {
    [0, 1]
}

/// Transform and sampling parameters of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub id: usize,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub rotation_deg: f64,
    /// Per-feature scale; empty means all ones.
    #[serde(default)]
    pub scale: Vec<f64>,
    /// Per-feature shift; empty means all zeros.
    #[serde(default)]
    pub shift: Vec<f64>,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub permutation: Option<Vec<usize>>,
    pub num_samples: usize,
    /// Class priors; empty means uniform.
    #[serde(default)]
    pub class_priors: Vec<f64>,
}

/// A benchmark: latent layout, seed and the list of domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub name: String,
    pub base_seed: u64,
    pub latent: LatentSpec,
    pub domains: Vec<DomainSpec>,
}

impl BenchmarkSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let l = &self.latent;
        if l.num_classes < 2 || l.input_dim < 2 {
            return Err(Error::config("need >= 2 classes and >= 2 input dims"));
        }
        if l.rotation_plane[0] == l.rotation_plane[1] || l.rotation_plane.iter().any(|&a| a >= l.input_dim) {
            return Err(Error::config("rotation plane must be two distinct valid axes"));
        }
        for (i, d) in self.domains.iter().enumerate() {
            if self.domains[..i].iter().any(|o| o.id == d.id) {
                return Err(Error::config(format!("duplicate domain id {}", d.id)));
            }
            d.validate(l)?;
        }
        Ok(())
    }

    /// Generates every domain in spec order.
    pub fn generate(&self) -> Result<Vec<DomainDataset>> {
        self.domains.iter().map(|d| make_domain(&self.latent, d, self.base_seed)).collect()
    }
}

impl DomainSpec {
    pub fn identity(id: usize, num_samples: usize) -> Self {
        Self {
            id,
            name: format!("domain{id}"),
            rotation_deg: 0.0,
            scale: Vec::new(),
            shift: Vec::new(),
            noise_sigma: 0.0,
            permutation: None,
            num_samples,
            class_priors: Vec::new(),
        }
    }

    pub fn validate(&self, latent: &LatentSpec) -> Result<()> {
        let (d, c) = (latent.input_dim, latent.num_classes);
        let bad = |msg: String| Err(Error::config(format!("domain {}: {msg}", self.id)));
        if self.num_samples < 2 * c {
            return bad(format!("needs at least {} samples", 2 * c));
        }
        if !self.scale.is_empty() && (self.scale.len() != d || self.scale.iter().any(|&s| s == 0.0 || !s.is_finite())) {
            return bad("scale must have input_dim nonzero entries".into());
        }
        if !self.shift.is_empty() && self.shift.len() != d {
            return bad("shift must have input_dim entries".into());
        }
        if let Some(p) = &self.permutation {
            let mut sorted = p.clone();
            sorted.sort_unstable();
            if sorted != (0..d).collect::<Vec<_>>() {
                return bad("permutation must be a permutation of 0..input_dim".into());
            }
        }
        if !self.class_priors.is_empty() {
            let sum: f64 = self.class_priors.iter().sum();
            if self.class_priors.len() != c || self.class_priors.iter().any(|&p| p <= 0.0) || (sum - 1.0).abs() > 1e-9 {
                return bad("class priors must be positive and sum to 1".into());
            }
        }
        if self.noise_sigma < 0.0 {
            return bad("noise sigma must be >= 0".into());
        }
        Ok(())
    }
}

/// Labeled samples of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub domain: usize,
    /// `[N, input_dim]`
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> DomainDataset {
        let d = self.input_dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.features.row(i));
        }
        DomainDataset {
            domain: self.domain,
            features: Tensor::new(vec![idx.len(), d], data).expect("sized"),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn as_batch(&self) -> Batch {
        Batch { domain: self.domain, x: self.features.clone(), labels: self.labels.clone() }
    }
}

/// A mini-batch drawn from one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub domain: usize,
    pub x: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Concatenates batches from several domains into one pooled batch.
/// The returned domain tags give the source domain of every row.
pub fn pool(batches: &[&Batch]) -> (Tensor, Vec<usize>, Vec<usize>) {
    let d = batches.first().map_or(0, |b| b.x.shape()[1]);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut domains = Vec::new();
    for b in batches {
        data.extend_from_slice(b.x.data());
        labels.extend_from_slice(&b.labels);
        domains.extend(std::iter::repeat_n(b.domain, b.len()));
    }
    let x = Tensor::new(vec![labels.len(), d], data).expect("pooled rows share width");
    (x, labels, domains)
}

fn rng_for(base_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(stream);
    rng
}

/// Class centers shared by every domain of a benchmark.
pub fn class_centers(latent: &LatentSpec, base_seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_for(base_seed, 0);
    let [u, v] = latent.rotation_plane;
    (0..latent.num_classes)
        .map(|c| {
            let mut center: Vec<f64> =
                (0..latent.input_dim).map(|_| latent.center_scale * rng.sample::<f64, _>(StandardNormal)).collect();
            let angle = 2.0 * std::f64::consts::PI * c as f64 / latent.num_classes as f64;
            center[u] = latent.plane_radius * angle.cos();
            center[v] = latent.plane_radius * angle.sin();
            center
        })
        .collect()
}

/// Per-class sample counts: largest-remainder rounding of `n * prior`,
/// with at least two samples per class.
fn class_counts(n: usize, priors: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = priors.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| (r.floor() as usize).max(2)).collect();
    let mut order: Vec<usize> = (0..priors.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let mut total: usize = counts.iter().sum();
    let mut k = 0;
    while total < n {
        counts[order[k % order.len()]] += 1;
        total += 1;
        k += 1;
    }
    while total > n {
        let largest = (0..counts.len()).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap();
        counts[largest] -= 1;
        total -= 1;
    }
    counts
}

/// Generates one domain deterministically from `(latent, spec, base_seed)`.
pub fn make_domain(latent: &LatentSpec, spec: &DomainSpec, base_seed: u64) -> Result<DomainDataset> {
    spec.validate(latent)?;
    let (d, c) = (latent.input_dim, latent.num_classes);
    let centers = class_centers(latent, base_seed);
    let priors = if spec.class_priors.is_empty() { vec![1.0 / c as f64; c] } else { spec.class_priors.clone() };
    let mut labels: Vec<usize> =
        class_counts(spec.num_samples, &priors).iter().enumerate().flat_map(|(y, &k)| std::iter::repeat_n(y, k)).collect();
    let mut rng = rng_for(base_seed, 1 + spec.id as u64);
    labels.shuffle(&mut rng);

    let (sin, cos) = spec.rotation_deg.to_radians().sin_cos();
    let [u, v] = latent.rotation_plane;
    let mut data = Vec::with_capacity(labels.len() * d);
    for &y in &labels {
        let mut z: Vec<f64> =
            centers[y].iter().map(|m| m + latent.within_class_sigma * rng.sample::<f64, _>(StandardNormal)).collect();
        let (a, b) = (z[u], z[v]);
        z[u] = cos * a - sin * b;
        z[v] = sin * a + cos * b;
        for (j, zj) in z.iter_mut().enumerate() {
            let s = spec.scale.get(j).copied().unwrap_or(1.0);
            let t = spec.shift.get(j).copied().unwrap_or(0.0);
            *zj = s * *zj + t;
        }
        if let Some(p) = &spec.permutation {
            z = p.iter().map(|&src| z[src]).collect();
        }
        for zj in z.iter_mut() {
            *zj += spec.noise_sigma * rng.sample::<f64, _>(StandardNormal);
        }
        data.extend(z);
    }
    Ok(DomainDataset {
        domain: spec.id,
        features: Tensor::new(vec![labels.len(), d], data)?,
        labels,
        num_classes: c,
    })
}

/// One leave-one-domain-out fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LeaveOneOut {
    pub sources: Vec<usize>,
    pub target: usize,
}

/// Every domain serves once as the held-out target.
pub fn leave_one_out_splits(domains: &[usize]) -> Result<Vec<LeaveOneOut>> {
    if domains.len() < 2 {
        return Err(Error::config("leave-one-domain-out needs at least 2 domains"));
    }
    Ok(domains
        .iter()
        .map(|&target| LeaveOneOut { sources: domains.iter().copied().filter(|&d| d != target).collect(), target })
        .collect())
}

/// Draws a batch without replacement. Stratified batches contain every
/// class at least once.
pub fn sample_batch<R: Rng + ?Sized>(dataset: &DomainDataset, batch_size: usize, stratified: bool, rng: &mut R) -> Result<Batch> {
    let n = dataset.len();
    if batch_size == 0 || batch_size > n {
        return Err(Error::config(format!("batch size {batch_size} not in 1..={n}")));
    }
    let idx = if stratified {
        let c = dataset.num_classes;
        if batch_size < c {
            return Err(Error::config(format!("stratified batch of {batch_size} cannot cover {c} classes")));
        }
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
        for (i, &y) in dataset.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        let mut taken = vec![false; n];
        let mut idx = Vec::with_capacity(batch_size);
        for members in &by_class {
            let Some(&pick) = members.choose(rng) else {
                return Err(Error::data(format!("domain {} lacks a class", dataset.domain)));
            };
            taken[pick] = true;
            idx.push(pick);
        }
        let rest: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
        idx.extend(index::sample(rng, rest.len(), batch_size - c).into_iter().map(|k| rest[k]));
        idx.shuffle(rng);
        idx
    } else {
        index::sample(rng, n, batch_size).into_vec()
    };
    Ok(dataset.subset(&idx).as_batch())
}

/// Class-stratified split; each part keeps original sample order.
pub fn train_test_split<R: Rng + ?Sized>(dataset: &DomainDataset, train_fraction: f64, rng: &mut R) -> Result<(DomainDataset, DomainDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config(format!("train fraction {train_fraction} not in (0, 1)")));
    }
    let counts = dataset.class_counts();
    let raw: Vec<f64> = counts.iter().map(|&k| k as f64 * train_fraction).collect();
    let mut take: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let target = (dataset.len() as f64 * train_fraction).round() as usize;
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    for &c in order.iter().cycle().take(target.saturating_sub(take.iter().sum())) {
        take[c] += 1;
    }
    for (t, &k) in take.iter_mut().zip(&counts) {
        if k >= 2 {
            *t = (*t).clamp(1, k - 1);
        }
    }

    let mut is_train = vec![false; dataset.len()];
    for (c, &t) in take.iter().enumerate() {
        let mut members: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i] == c).collect();
        members.shuffle(rng);
        for &i in &members[..t] {
            is_train[i] = true;
        }
    }
    let (train, test): (Vec<usize>, Vec<usize>) = (0..dataset.len()).partition(|&i| is_train[i]);
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

/// Writes datasets as CSV with header `domain,label,f0..f{d-1}`.
pub fn write_csv(path: &Path, datasets: &[DomainDataset]) -> Result<()> {
    let d = datasets.first().map_or(0, DomainDataset::input_dim);
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["domain".to_string(), "label".to_string()];
    header.extend((0..d).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for ds in datasets {
        for i in 0..ds.len() {
            let mut rec = vec![ds.domain.to_string(), ds.labels[i].to_string()];
            rec.extend(ds.features.row(i).iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads datasets written by [`write_csv`], grouped by domain in order of
/// first appearance.
pub fn read_csv(path: &Path, num_classes: usize) -> Result<Vec<DomainDataset>> {
    let mut r = csv::Reader::from_path(path)?;
    let width = r.headers()?.len();
    if width < 3 {
        return Err(Error::Format("csv needs domain, label and at least one feature".into()));
    }
    let mut groups: Vec<(usize, Vec<f64>, Vec<usize>)> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse_usize = |k: usize| rec[k].parse::<usize>().map_err(|e| Error::Format(format!("{e}: {:?}", &rec[k])));
        let (domain, label) = (parse_usize(0)?, parse_usize(1)?);
        if label >= num_classes {
            return Err(Error::data(format!("label {label} out of range")));
        }
        let feats = (2..width)
            .map(|k| rec[k].parse::<f64>().map_err(|e| Error::Format(format!("{e}: {:?}", &rec[k]))))
            .collect::<Result<Vec<_>>>()?;
        let pos = match groups.iter().position(|g| g.0 == domain) {
            Some(p) => p,
            None => {
                groups.push((domain, Vec::new(), Vec::new()));
                groups.len() - 1
            }
        };
        groups[pos].1.extend(feats);
        groups[pos].2.push(label);
    }
    groups
        .into_iter()
        .map(|(domain, data, labels)| {
            Ok(DomainDataset { domain, features: Tensor::new(vec![labels.len(), width - 2], data)?, labels, num_classes })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn latent() -> LatentSpec {
        LatentSpec {
            input_dim: 6,
            num_classes: 4,
            rotation_plane: [0, 1],
            plane_radius: 3.0,
            center_scale: 1.0,
            within_class_sigma: 0.5,
        }
    }

    #[test]
    fn identical_specs_give_identical_data() {
        let spec = DomainSpec::identity(0, 40);
        let a = make_domain(&latent(), &spec, 9).unwrap();
        let b = make_domain(&latent(), &spec, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), vec![10, 10, 10, 10]);
    }

    fn plane_means(ds: &DomainDataset) -> Vec<[f64; 2]> {
        let mut sums = vec![[0.0; 2]; ds.num_classes];
        for (i, &y) in ds.labels.iter().enumerate() {
            sums[y][0] += ds.features.row(i)[0];
            sums[y][1] += ds.features.row(i)[1];
        }
        let counts = ds.class_counts();
        sums.iter().zip(counts).map(|(s, k)| [s[0] / k as f64, s[1] / k as f64]).collect()
    }

    #[test]
    fn half_turn_negates_plane_means() {
        let base = DomainSpec::identity(1, 40);
        let turned = DomainSpec { rotation_deg: 180.0, ..base.clone() };
        let a = plane_means(&make_domain(&latent(), &base, 2).unwrap());
        let b = plane_means(&make_domain(&latent(), &turned, 2).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x[0] + y[0]).abs() < 1e-12 && (x[1] + y[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_latent_means_agree_across_domains() {
        let l = LatentSpec { within_class_sigma: 0.0, ..latent() };
        let a = make_domain(&l, &DomainSpec::identity(0, 40), 5).unwrap();
        let b = make_domain(&l, &DomainSpec::identity(1, 40), 5).unwrap();
        assert_eq!(plane_means(&a), plane_means(&b));
    }

    #[test]
    fn spec_validation() {
        let mut s = DomainSpec::identity(0, 4);
        assert!(s.validate(&latent()).is_err());
        s.num_samples = 40;
        s.permutation = Some(vec![0, 0, 1, 2, 3, 4]);
        assert!(s.validate(&latent()).is_err());
        s.permutation = Some(vec![5, 4, 3, 2, 1, 0]);
        s.class_priors = vec![0.5, 0.5, 0.1, 0.1];
        assert!(s.validate(&latent()).is_err());
    }

    #[test]
    fn leave_one_out() {
        let splits = leave_one_out_splits(&[0, 1, 2, 3]).unwrap();
        assert_eq!(splits.len(), 4);
        assert!(splits.iter().all(|s| s.sources.len() == 3 && !s.sources.contains(&s.target)));
        assert_eq!(leave_one_out_splits(&[4, 7]).unwrap().len(), 2);
        assert!(leave_one_out_splits(&[1]).is_err());
    }

    #[test]
    fn batches() {
        let ds = make_domain(&latent(), &DomainSpec::identity(0, 40), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let full = sample_batch(&ds, 40, false, &mut rng).unwrap();
        let mut sorted = full.labels.clone();
        sorted.sort_unstable();
        let mut orig = ds.labels.clone();
        orig.sort_unstable();
        assert_eq!(sorted, orig);

        for _ in 0..50 {
            let b = sample_batch(&ds, 5, true, &mut rng).unwrap();
            assert!((0..4).all(|c| b.labels.contains(&c)));
        }
        assert!(sample_batch(&ds, 3, true, &mut rng).is_err());
        assert!(sample_batch(&ds, 41, false, &mut rng).is_err());

        let b1 = sample_batch(&ds, 8, true, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b2 = sample_batch(&ds, 8, true, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn split_sizes() {
        let l = LatentSpec { num_classes: 5, ..latent() };
        let ds = make_domain(&l, &DomainSpec::identity(0, 100), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (tr, te) = train_test_split(&ds, 0.7, &mut rng).unwrap();
        assert_eq!((tr.len(), te.len()), (70, 30));
        let (tr, te) = train_test_split(&ds, 0.8, &mut rng).unwrap();
        assert_eq!((tr.len(), te.len()), (80, 20));
        let mut all: Vec<Vec<u64>> = tr
            .features
            .data()
            .chunks(6)
            .chain(te.features.data().chunks(6))
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut orig: Vec<Vec<u64>> = ds.features.data().chunks(6).map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        all.sort();
        orig.sort();
        assert_eq!(all, orig);
        assert!(train_test_split(&ds, 1.0, &mut rng).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let l = latent();
        let ds = vec![
            make_domain(&l, &DomainSpec::identity(0, 8), 1).unwrap(),
            make_domain(&l, &DomainSpec { rotation_deg: 30.0, ..DomainSpec::identity(3, 8) }, 1).unwrap(),
        ];
        write_csv(&path, &ds).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("domain,label,f0,f1,f2,f3,f4,f5\n"));
        assert_eq!(read_csv(&path, 4).unwrap(), ds);
    }

    #[test]
    fn spec_toml_round_trip() {
        let spec = BenchmarkSpec {
            name: "t".into(),
            base_seed: 3,
            latent: latent(),
            domains: vec![DomainSpec::identity(0, 20), DomainSpec { rotation_deg: 45.0, ..DomainSpec::identity(1, 20) }],
        };
        assert_eq!(BenchmarkSpec::from_toml(&spec.to_toml()).unwrap(), spec);
    }
}
