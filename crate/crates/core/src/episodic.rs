//! Episodic meta-learning engine.
//!
//! Each iteration splits the source domains into meta-train and meta-test,
//! takes one differentiable gradient step on the meta-train task loss, and
//! evaluates the semantic meta-objective with the stepped parameters. The
//! outer update of the feature extractor and task net differentiates that
//! objective back through the inner step. The metric net gets its own plain
//! update on the local loss.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_by_norm, grad, Expr, GradMap};
use crate::bench::{pool, sample_batch, Batch, DomainDataset};
use crate::losses::{
    alignment_over_pairs, contrastive_loss, global_alignment_loss, pair_alignment, task_loss,
    triplet_loss_semihard, LocalLossKind, SoftLabelMatrix,
};
use crate::nets::{
    feature_forward, init_params, metric_forward, read_params, sgd_step, task_forward, write_params,
    Architecture, NetRole, ParamSet,
};
use crate::{Error, Result};

/// Which domains the task loss of the outer update is evaluated on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterTaskDomains {
    #[default]
    MetaTrain,
    All,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterOptimizer {
    #[default]
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    /// Inner learning rate (alpha).
    pub inner_lr: f64,
    /// Initial outer learning rate for the feature extractor and task net (eta).
    pub outer_lr: f64,
    /// Metric-net learning rate (gamma), not decayed.
    pub metric_lr: f64,
    pub beta_global: f64,
    pub beta_local: f64,
    pub temperature: f64,
    pub margin: f64,
    pub clip_threshold: f64,
    /// Also clip the combined outer gradient.
    pub clip_outer: bool,
    pub clip_metric: bool,
    pub decay_rate: f64,
    pub decay_every: u64,
    /// Samples per source domain per iteration.
    pub batch_size: usize,
    pub n_meta_train: usize,
    pub n_meta_test: usize,
    pub local_loss: LocalLossKind,
    pub outer_task_domains: OuterTaskDomains,
    pub outer_optimizer: OuterOptimizer,
    pub max_iterations: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            inner_lr: 1e-5,
            outer_lr: 1e-3,
            metric_lr: 1e-5,
            beta_global: 1.0,
            beta_local: 0.005,
            temperature: crate::losses::DEFAULT_TEMPERATURE,
            margin: crate::losses::DEFAULT_MARGIN,
            clip_threshold: 2.0,
            clip_outer: true,
            clip_metric: false,
            decay_rate: 0.02,
            decay_every: 1000,
            batch_size: 128,
            n_meta_train: 2,
            n_meta_test: 1,
            local_loss: LocalLossKind::Triplet,
            outer_task_domains: OuterTaskDomains::MetaTrain,
            outer_optimizer: OuterOptimizer::Sgd,
            max_iterations: 1000,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self, num_domains: usize, num_classes: usize) -> Result<()> {
        let lrs = [self.inner_lr, self.outer_lr, self.metric_lr];
        if lrs.iter().any(|&lr| !(lr > 0.0)) {
            return Err(Error::config("learning rates must be > 0"));
        }
        if self.beta_global < 0.0 || self.beta_local < 0.0 {
            return Err(Error::config("meta-loss weights must be >= 0"));
        }
        if !(self.temperature > 0.0) || !(self.clip_threshold > 0.0) || self.margin < 0.0 {
            return Err(Error::config("temperature and clip threshold must be > 0, margin >= 0"));
        }
        if !(0.0..1.0).contains(&self.decay_rate) || self.decay_every == 0 {
            return Err(Error::config("decay rate must be in [0, 1) and decay_every >= 1"));
        }
        if self.n_meta_train == 0 || self.n_meta_test == 0 || self.n_meta_train + self.n_meta_test != num_domains {
            return Err(Error::config(format!(
                "meta-train {} + meta-test {} must equal the {num_domains} source domains",
                self.n_meta_train, self.n_meta_test
            )));
        }
        if self.batch_size < 2 * num_classes {
            return Err(Error::config(format!("batch size must be >= {}", 2 * num_classes)));
        }
        Ok(())
    }
}

/// Which algorithm components are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationFlags {
    pub episodic: bool,
    pub use_global: bool,
    pub use_local: bool,
}

impl AblationFlags {
    pub const DEEP_ALL: Self = Self { episodic: false, use_global: false, use_local: false };
    pub const FULL: Self = Self { episodic: true, use_global: true, use_local: true };

    /// All eight on/off combinations, DeepAll first and the full method last.
    pub fn grid() -> [Self; 8] {
        let f = |episodic, use_global, use_local| Self { episodic, use_global, use_local };
        [
            f(false, false, false),
            f(true, false, false),
            f(false, true, false),
            f(false, false, true),
            f(false, true, true),
            f(true, true, false),
            f(true, false, true),
            f(true, true, true),
        ]
    }

    /// Compact label such as `E-G-L` or `---`.
    pub fn label(&self) -> String {
        let mark = |on: bool, c: char| if on { c } else { '-' };
        [mark(self.episodic, 'E'), mark(self.use_global, 'G'), mark(self.use_local, 'L')].iter().collect()
    }
}

/// Exponential step decay `lr0 * (1 - rate)^floor(t / every)`.
pub fn decayed_lr(lr0: f64, t: u64, decay_rate: f64, decay_every: u64) -> f64 {
    lr0 * (1.0 - decay_rate).powi((t / decay_every.max(1)) as i32)
}

/// Uniformly random disjoint split of `domains` into (meta-train, meta-test).
pub fn split_domains<R: Rng + ?Sized>(domains: &[usize], n_train: usize, n_test: usize, rng: &mut R) -> Result<(Vec<usize>, Vec<usize>)> {
    if domains.len() < 2 {
        return Err(Error::config("episodic training needs at least 2 source domains"));
    }
    if n_train == 0 || n_test == 0 || n_train + n_test != domains.len() {
        return Err(Error::config(format!("cannot split {} domains into {n_train} + {n_test}", domains.len())));
    }
    let mut shuffled = domains.to_vec();
    shuffled.shuffle(rng);
    let test = shuffled.split_off(n_train);
    Ok((shuffled, test))
}

fn joint_params(psi: &ParamSet, theta: &ParamSet) -> Vec<Expr> {
    let mut params = psi.exprs();
    params.extend(theta.exprs());
    params
}

/// Mean task loss over a set of per-domain batches.
pub fn mean_task_loss(psi: &ParamSet, theta: &ParamSet, batches: &[&Batch]) -> Result<Expr> {
    if batches.is_empty() {
        return Err(Error::data("task loss over zero batches"));
    }
    let mut total = Expr::scalar(0.0);
    for b in batches {
        let logits = task_forward(theta, &feature_forward(psi, &Expr::leaf(b.x.clone()))?)?;
        total = total.add(&task_loss(&logits, &b.labels)?)?;
    }
    Ok(total.scale(1.0 / batches.len() as f64))
}

/// Result of the differentiable inner step.
#[derive(Clone, Debug)]
pub struct InnerUpdate {
    pub psi: ParamSet,
    pub theta: ParamSet,
    /// Meta-train task loss at the original parameters.
    pub task_loss: Expr,
    pub grad_norm: f64,
}

/// One clipped plain gradient step on the meta-train task loss. The
/// stepped parameters remain functions of the originals.
pub fn inner_update(psi: &ParamSet, theta: &ParamSet, meta_train: &[&Batch], inner_lr: f64, clip_threshold: f64) -> Result<InnerUpdate> {
    let loss = mean_task_loss(psi, theta, meta_train)?;
    ensure_finite(loss.item(), "meta-train task loss")?;
    let grads = grad(&loss, &joint_params(psi, theta))?;
    let grad_norm = grads.global_norm();
    let clipped = clip_by_norm(&grads, clip_threshold)?;
    Ok(InnerUpdate {
        psi: sgd_step(psi, &clipped, inner_lr)?,
        theta: sgd_step(theta, &clipped, inner_lr)?,
        task_loss: loss,
        grad_norm,
    })
}

/// Local clustering loss on embeddings of a pooled multi-domain batch.
pub fn local_loss<R: Rng + ?Sized>(psi: &ParamSet, phi: &ParamSet, batches: &[&Batch], kind: LocalLossKind, margin: f64, rng: &mut R) -> Result<Expr> {
    let (x, labels, _) = pool(batches);
    let emb = metric_forward(phi, &feature_forward(psi, &Expr::leaf(x))?)?;
    match kind {
        LocalLossKind::Contrastive => contrastive_loss(&emb, &labels, margin, rng),
        LocalLossKind::Triplet => triplet_loss_semihard(&emb, &labels, margin),
    }
}

/// Alignment averaged over every unordered pair of domains; used when
/// episodic splitting is disabled.
fn alignment_all_pairs(psi: &ParamSet, theta: &ParamSet, batches: &[&Batch], num_classes: usize, tau: f64) -> Result<Expr> {
    let mats =
        batches.iter().map(|b| SoftLabelMatrix::for_batch(psi, theta, b, num_classes, tau)).collect::<Result<Vec<_>>>()?;
    if mats.len() < 2 {
        return alignment_over_pairs(&mats, &mats);
    }
    let mut total = Expr::scalar(0.0);
    let mut count = 0;
    for i in 0..mats.len() {
        for j in i + 1..mats.len() {
            total = total.add(&pair_alignment(&mats[i], &mats[j])?)?;
            count += 1;
        }
    }
    Ok(total.scale(1.0 / count as f64))
}

fn ensure_finite(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} = {v}")))
    }
}

/// One row of per-iteration training scalars.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub task_loss: f64,
    pub global_loss: Option<f64>,
    pub local_loss: Option<f64>,
    pub meta_loss: f64,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub metric_lr: f64,
    /// Outer gradient norm before clipping.
    pub grad_norm: f64,
    pub metric_grad_norm: Option<f64>,
    /// Unseen-domain margin statistic, filled in at evaluation checkpoints.
    pub margin: Option<f64>,
    /// Source-to-target alignment loss, filled in at evaluation checkpoints.
    pub target_alignment: Option<f64>,
}

/// Full optimizer state.
#[derive(Clone, Debug)]
pub struct EpisodeState {
    pub arch: Architecture,
    pub psi: ParamSet,
    pub theta: ParamSet,
    pub phi: ParamSet,
    pub iteration: u64,
    pub hyper: Hyperparams,
    pub flags: AblationFlags,
    /// Drives batch sampling only, so data order is independent of `flags`.
    pub data_rng: ChaCha8Rng,
    /// Drives domain splits and pair shuffles.
    pub episode_rng: ChaCha8Rng,
}

impl EpisodeState {
    pub fn new(arch: Architecture, hyper: Hyperparams, flags: AblationFlags, seed: u64) -> Result<Self> {
        let (psi, theta, phi) = init_params(&arch, seed)?;
        let mut data_rng = ChaCha8Rng::seed_from_u64(seed);
        data_rng.set_stream(1);
        let mut episode_rng = ChaCha8Rng::seed_from_u64(seed);
        episode_rng.set_stream(2);
        Ok(Self { arch, psi, theta, phi, iteration: 0, hyper, flags, data_rng, episode_rng })
    }

    fn beta_global(&self) -> f64 {
        if self.flags.use_global { self.hyper.beta_global } else { 0.0 }
    }

    fn beta_local(&self) -> f64 {
        if self.flags.use_local { self.hyper.beta_local } else { 0.0 }
    }

    pub fn current_outer_lr(&self) -> f64 {
        decayed_lr(self.hyper.outer_lr, self.iteration, self.hyper.decay_rate, self.hyper.decay_every)
    }

    /// Draws one stratified batch per source domain.
    pub fn sample_batches(&mut self, data: &[DomainDataset]) -> Result<Vec<Batch>> {
        data.iter().map(|d| sample_batch(d, self.hyper.batch_size, true, &mut self.data_rng)).collect()
    }

    /// One training iteration on per-domain batches.
    pub fn meta_step(&mut self, batches: &[Batch]) -> Result<MetricsRecord> {
        let h = self.hyper.clone();
        let c = self.arch.num_classes;
        let all: Vec<&Batch> = batches.iter().collect();
        let (beta_g, beta_l) = (self.beta_global(), self.beta_local());
        let meta_active = beta_g > 0.0 || beta_l > 0.0;

        // adapted parameters and the task loss of the outer update
        let (psi_adapted, theta_adapted, task, train_ix, test_ix);
        if self.flags.episodic {
            let ids: Vec<usize> = (0..batches.len()).collect();
            let (tr, te) = split_domains(&ids, h.n_meta_train, h.n_meta_test, &mut self.episode_rng)?;
            if tr.iter().any(|i| te.contains(i)) || tr.len() + te.len() != batches.len() {
                return Err(Error::data("domain split is not a partition"));
            }
            let tr_batches: Vec<&Batch> = tr.iter().map(|&i| &batches[i]).collect();
            if meta_active {
                let inner = inner_update(&self.psi, &self.theta, &tr_batches, h.inner_lr, h.clip_threshold)?;
                psi_adapted = inner.psi;
                theta_adapted = inner.theta;
                task = match h.outer_task_domains {
                    OuterTaskDomains::MetaTrain => inner.task_loss,
                    OuterTaskDomains::All => mean_task_loss(&self.psi, &self.theta, &all)?,
                };
            } else {
                psi_adapted = self.psi.clone();
                theta_adapted = self.theta.clone();
                task = match h.outer_task_domains {
                    OuterTaskDomains::MetaTrain => mean_task_loss(&self.psi, &self.theta, &tr_batches)?,
                    OuterTaskDomains::All => mean_task_loss(&self.psi, &self.theta, &all)?,
                };
            }
            train_ix = tr;
            test_ix = te;
        } else {
            psi_adapted = self.psi.clone();
            theta_adapted = self.theta.clone();
            task = mean_task_loss(&self.psi, &self.theta, &all)?;
            train_ix = Vec::new();
            test_ix = Vec::new();
        }
        ensure_finite(task.item(), "task loss")?;

        let global = if beta_g > 0.0 {
            Some(if self.flags.episodic {
                let tr: Vec<&Batch> = train_ix.iter().map(|&i| &batches[i]).collect();
                let te: Vec<&Batch> = test_ix.iter().map(|&i| &batches[i]).collect();
                global_alignment_loss(&tr, &te, &psi_adapted, &theta_adapted, c, h.temperature)?
            } else {
                alignment_all_pairs(&psi_adapted, &theta_adapted, &all, c, h.temperature)?
            })
        } else {
            None
        };
        let local = if beta_l > 0.0 {
            Some(local_loss(&psi_adapted, &self.phi, &all, h.local_loss, h.margin, &mut self.episode_rng)?)
        } else {
            None
        };

        let mut meta = Expr::scalar(0.0);
        if let Some(g) = &global {
            meta = meta.add(&g.scale(beta_g))?;
        }
        if let Some(l) = &local {
            meta = meta.add(&l.scale(beta_l))?;
        }
        let total = task.add(&meta)?;
        ensure_finite(total.item(), "meta objective")?;

        let outer_lr = self.current_outer_lr();
        let grads = grad(&total, &joint_params(&self.psi, &self.theta))?;
        let grad_norm = grads.global_norm();
        ensure_finite(grad_norm, "outer gradient norm")?;
        let grads = if h.clip_outer { clip_by_norm(&grads, h.clip_threshold)? } else { grads };
        let grads = detach_grads(&grads);
        let new_psi = sgd_step(&self.psi, &grads, outer_lr)?.detach();
        let new_theta = sgd_step(&self.theta, &grads, outer_lr)?.detach();

        let metric_grad_norm = match &local {
            Some(l) => {
                let g = grad(l, &self.phi.exprs())?;
                let norm = g.global_norm();
                ensure_finite(norm, "metric gradient norm")?;
                let g = if h.clip_metric { clip_by_norm(&g, h.clip_threshold)? } else { g };
                self.phi = sgd_step(&self.phi, &detach_grads(&g), h.metric_lr)?.detach();
                Some(norm)
            }
            None => None,
        };
        self.psi = new_psi;
        self.theta = new_theta;
        self.iteration += 1;

        Ok(MetricsRecord {
            iteration: self.iteration,
            task_loss: task.item(),
            global_loss: global.as_ref().map(Expr::item),
            local_loss: local.as_ref().map(Expr::item),
            meta_loss: meta.item(),
            inner_lr: h.inner_lr,
            outer_lr,
            metric_lr: h.metric_lr,
            grad_norm,
            metric_grad_norm,
            margin: None,
            target_alignment: None,
        })
    }

    /// Runs `iterations` steps, sampling fresh batches from `data` each
    /// time and handing every record to `sink` as it is produced.
    pub fn train<F>(&mut self, data: &[DomainDataset], iterations: u64, mut sink: F) -> Result<()>
    where
        F: FnMut(&EpisodeState, MetricsRecord) -> Result<()>,
    {
        if iterations == 0 {
            return Err(Error::config("iterations must be >= 1"));
        }
        self.hyper.validate(data.len(), self.arch.num_classes)?;
        for _ in 0..iterations {
            let batches = self.sample_batches(data)?;
            let record = self.meta_step(&batches)?;
            sink(self, record)?;
        }
        Ok(())
    }

    /// Directory `{root}/{run_id}/ckpt_{t}` for the current iteration.
    pub fn checkpoint_dir(&self, root: &Path, run_id: &str) -> PathBuf {
        root.join(run_id).join(format!("ckpt_{}", self.iteration))
    }

    pub fn save_checkpoint(&self, root: &Path, run_id: &str) -> Result<PathBuf> {
        let dir = self.checkpoint_dir(root, run_id);
        for params in [&self.psi, &self.theta, &self.phi] {
            write_params(&dir.join(format!("{}.bin", params.role().tag())), params)?;
        }
        Ok(dir)
    }
}

/// Loads `(psi, theta, phi)` from a checkpoint directory.
pub fn load_checkpoint(dir: &Path) -> Result<(ParamSet, ParamSet, ParamSet)> {
    let load = |role: NetRole| read_params(&dir.join(format!("{}.bin", role.tag())), role);
    Ok((load(NetRole::FeatureExtractor)?, load(NetRole::TaskNet)?, load(NetRole::MetricNet)?))
}

fn detach_grads(grads: &GradMap) -> GradMap {
    GradMap::from_entries(grads.iter().map(|(p, g)| (p.clone(), g.detach())).collect())
}
