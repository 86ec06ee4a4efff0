//! Leave-one-domain-out experiment runner.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::{embed, evaluate_accuracy, margin_statistic, silhouette_score, target_alignment};
use super::svg::{line_chart, Series};
use crate::bench::{leave_one_out_splits, train_test_split, BenchmarkSpec, DomainDataset, LeaveOneOut};
use crate::episodic::{AblationFlags, EpisodeState, Hyperparams, MetricsRecord};
use crate::nets::Architecture;
use crate::{Error, Result};

/// Environment variable that overrides [`ExperimentConfig::output_dir`].
pub const OUT_DIR_ENV: &str = "MASF_OUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Benchmark spec file; relative paths resolve against the config file.
    pub benchmark: PathBuf,
    pub seeds: Vec<u64>,
    /// Training iterations per run; falls back to `hyper.max_iterations`.
    pub iterations: Option<u64>,
    pub output_dir: PathBuf,
    /// Diagnostics (margin, target alignment) are logged every this many iterations.
    pub eval_every: u64,
    /// Per-domain fraction used for training; the rest is held out.
    pub train_fraction: f64,
    /// Anchor draws per margin estimate.
    pub margin_pairs: usize,
    pub plots: bool,
    /// Held-out targets to run; empty means every domain.
    pub targets: Vec<usize>,
    /// Worker threads; 0 uses the available parallelism.
    pub threads: usize,
    pub arch: Architecture,
    pub hyper: Hyperparams,
    /// Ablation rows; defaults to the full grid.
    pub rows: Vec<AblationFlags>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            benchmark: PathBuf::from("bench/specs/canonical.toml"),
            seeds: vec![0, 1, 2],
            iterations: None,
            output_dir: PathBuf::from("out"),
            eval_every: 50,
            train_fraction: 0.7,
            margin_pairs: 500,
            plots: true,
            targets: Vec::new(),
            threads: 0,
            arch: Architecture::default(),
            hyper: Hyperparams::default(),
            rows: AblationFlags::grid().to_vec(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("experiment config: {e}")))
    }

    /// Parses a config file and resolves its benchmark path.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&fs::read_to_string(path)?)?;
        if cfg.benchmark.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.benchmark = dir.join(&cfg.benchmark);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies the `MASF_OUT_DIR` override if set.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV).filter(|d| !d.is_empty()) {
            self.output_dir = PathBuf::from(dir);
        }
    }

    pub fn iterations(&self) -> u64 {
        self.iterations.unwrap_or(self.hyper.max_iterations)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must be non-empty"));
        }
        if self.rows.is_empty() {
            return Err(Error::config("at least one ablation row is required"));
        }
        for (i, r) in self.rows.iter().enumerate() {
            if self.rows[..i].contains(r) {
                return Err(Error::config(format!("duplicate ablation row {}", r.label())));
            }
        }
        if self.iterations() == 0 || self.eval_every == 0 {
            return Err(Error::config("iterations and eval_every must be >= 1"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("train_fraction must be in (0, 1)"));
        }
        if self.margin_pairs == 0 {
            return Err(Error::config("margin_pairs must be >= 1"));
        }
        self.arch.validate()
    }
}

/// One domain split into training and held-out parts.
#[derive(Clone, Debug)]
pub struct DomainSplit {
    pub train: DomainDataset,
    pub held_out: DomainDataset,
    pub full: DomainDataset,
}

/// Generates the benchmark and splits every domain with a seed-independent stream.
pub fn prepare_domains(spec: &BenchmarkSpec, train_fraction: f64) -> Result<Vec<DomainSplit>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.base_seed);
    rng.set_stream(u64::MAX);
    spec.generate()?
        .into_iter()
        .map(|full| {
            let (train, held_out) = train_test_split(&full, train_fraction, &mut rng)?;
            Ok(DomainSplit { train, held_out, full })
        })
        .collect()
}

/// Outcome of one (target, row, seed) run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub target: usize,
    pub flags: AblationFlags,
    pub seed: u64,
    pub accuracy: Option<f64>,
    /// Final target-vs-source margin statistic, averaged over sources.
    pub margin: Option<f64>,
    /// Final target-vs-source alignment loss, averaged over sources.
    pub alignment: Option<f64>,
    /// Silhouette of metric embeddings on held-out source data.
    pub silhouette: Option<f64>,
    pub error: Option<String>,
    pub history: Vec<MetricsRecord>,
}

impl RunResult {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }

    pub fn run_id(&self) -> String {
        run_id(self.target, self.flags, self.seed)
    }
}

pub fn run_id(target: usize, flags: AblationFlags, seed: u64) -> String {
    format!("t{target}_{}_s{seed}", flags.label().replace('-', "_"))
}

/// Everything the diagnostics need for one fold.
struct Fold<'a> {
    sources_train: Vec<DomainDataset>,
    sources_held_out: Vec<&'a DomainDataset>,
    target: &'a DomainDataset,
}

/// Trains one configuration and evaluates it on the held-out target.
pub fn run_single(cfg: &ExperimentConfig, domains: &[DomainSplit], split: &LeaveOneOut, flags: AblationFlags, seed: u64) -> RunResult {
    run_single_with_state(cfg, domains, split, flags, seed).0
}

/// [`run_single`] that also hands back the trained state, unless training failed.
pub fn run_single_with_state(
    cfg: &ExperimentConfig,
    domains: &[DomainSplit],
    split: &LeaveOneOut,
    flags: AblationFlags,
    seed: u64,
) -> (RunResult, Option<EpisodeState>) {
    let mut result = RunResult {
        target: split.target,
        flags,
        seed,
        accuracy: None,
        margin: None,
        alignment: None,
        silhouette: None,
        error: None,
        history: Vec::new(),
    };
    let fold = Fold {
        sources_train: split.sources.iter().map(|&s| domains[s].train.clone()).collect(),
        sources_held_out: split.sources.iter().map(|&s| &domains[s].held_out).collect(),
        target: &domains[split.target].full,
    };
    match train_and_evaluate(cfg, &fold, flags, seed, &mut result) {
        Ok(state) => (result, Some(state)),
        Err(e) => {
            log::warn!("run {} failed: {e}", result.run_id());
            result.error = Some(e.to_string());
            (result, None)
        }
    }
}

fn train_and_evaluate(cfg: &ExperimentConfig, fold: &Fold<'_>, flags: AblationFlags, seed: u64, out: &mut RunResult) -> Result<EpisodeState> {
    let tau = cfg.hyper.temperature;
    let mut state = EpisodeState::new(cfg.arch.clone(), cfg.hyper.clone(), flags, seed)?;
    // diagnostics draw from their own stream so they never perturb training
    let mut diag_rng = ChaCha8Rng::seed_from_u64(seed);
    diag_rng.set_stream(3 + out.target as u64);
    let iterations = cfg.iterations();
    let history = &mut out.history;
    state.train(&fold.sources_train, iterations, |st, mut rec| {
        if rec.iteration % cfg.eval_every == 0 || rec.iteration == iterations {
            let s = diag_rng.random_range(0..fold.sources_held_out.len());
            let source = fold.sources_held_out[s];
            rec.margin = Some(margin_statistic(&st.psi, &st.phi, fold.target, source, cfg.margin_pairs, &mut diag_rng)?.mean);
            rec.target_alignment = Some(target_alignment(&st.psi, &st.theta, source, fold.target, tau)?);
        }
        history.push(rec);
        Ok(())
    })?;

    let n = fold.sources_held_out.len() as f64;
    let mut margin = 0.0;
    let mut alignment = 0.0;
    for source in &fold.sources_held_out {
        margin += margin_statistic(&state.psi, &state.phi, fold.target, source, cfg.margin_pairs, &mut diag_rng)?.mean / n;
        alignment += target_alignment(&state.psi, &state.theta, source, fold.target, tau)? / n;
    }
    let pooled = pool_datasets(&fold.sources_held_out);
    out.silhouette = Some(silhouette_score(&embed(&state.psi, &state.phi, &pooled)?, &pooled.labels)?);
    out.margin = Some(margin);
    out.alignment = Some(alignment);
    out.accuracy = Some(evaluate_accuracy(&state.psi, &state.theta, fold.target)?);
    Ok(state)
}

fn pool_datasets(sets: &[&DomainDataset]) -> DomainDataset {
    let rows: Vec<Vec<f64>> = sets.iter().flat_map(|d| (0..d.len()).map(|i| d.features.row(i).to_vec())).collect();
    DomainDataset {
        domain: usize::MAX,
        features: crate::autodiff::Tensor::from_rows(&rows),
        labels: sets.iter().flat_map(|d| d.labels.iter().copied()).collect(),
        num_classes: sets[0].num_classes,
    }
}

/// Mean and sample standard deviation; `std` is `None` for fewer than two values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: Option<f64>,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n >= 2).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
        Some(Self { mean, std, n })
    }
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.std {
            Some(s) => write!(f, "{:.2} ± {:.2}", 100.0 * self.mean, 100.0 * s),
            None => write!(f, "{:.2} ± n/a", 100.0 * self.mean),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Report {
    pub runs: Vec<RunResult>,
    pub output_dir: PathBuf,
}

impl Report {
    pub fn rows(&self) -> Vec<AblationFlags> {
        let mut rows: Vec<AblationFlags> = Vec::new();
        for r in &self.runs {
            if !rows.contains(&r.flags) {
                rows.push(r.flags);
            }
        }
        rows
    }

    pub fn targets(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.runs.iter().map(|r| r.target).collect();
        t.sort_unstable();
        t.dedup();
        t
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.runs.iter().map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    fn successful(&self, flags: AblationFlags) -> impl Iterator<Item = &RunResult> {
        self.runs.iter().filter(move |r| r.flags == flags && !r.failed())
    }

    /// Per-seed value of `metric` averaged over targets, for seeds where every target succeeded.
    pub fn per_seed<F: Fn(&RunResult) -> Option<f64>>(&self, flags: AblationFlags, metric: F) -> BTreeMap<u64, f64> {
        let targets = self.targets();
        let mut out = BTreeMap::new();
        for seed in self.seeds() {
            let vals: Vec<f64> = self.successful(flags).filter(|r| r.seed == seed).filter_map(&metric).collect();
            if vals.len() == targets.len() {
                out.insert(seed, vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        out
    }

    /// Accuracy over seeds of the target-averaged accuracy.
    pub fn average_accuracy(&self, flags: AblationFlags) -> Option<Summary> {
        Summary::of(&self.per_seed(flags, |r| r.accuracy).into_values().collect::<Vec<_>>())
    }

    pub fn target_accuracy(&self, flags: AblationFlags, target: usize) -> Option<Summary> {
        let v: Vec<f64> = self.successful(flags).filter(|r| r.target == target).filter_map(|r| r.accuracy).collect();
        Summary::of(&v)
    }

    /// Human-readable table, one line per row.
    pub fn table(&self) -> String {
        let targets = self.targets();
        let mut s = format!("{:<6}", "row");
        for t in &targets {
            s += &format!(" {:>16}", format!("target {t}"));
        }
        s += &format!(" {:>16}\n", "average");
        let cell = |x: Option<Summary>| x.map_or("failed".to_string(), |x| x.to_string());
        for flags in self.rows() {
            s += &format!("{:<6}", flags.label());
            for &t in &targets {
                s += &format!(" {:>16}", cell(self.target_accuracy(flags, t)));
            }
            s += &format!(" {:>16}\n", cell(self.average_accuracy(flags)));
        }
        s
    }
}

/// Writes `report.csv` with one line per run. Failed runs carry `failed` as accuracy.
pub fn write_report_csv(path: &Path, runs: &[RunResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["target", "episodic", "global", "local", "seed", "accuracy"])?;
    for r in runs {
        let acc = match (&r.error, r.accuracy) {
            (None, Some(a)) => a.to_string(),
            _ => "failed".to_string(),
        };
        let b = |on: bool| if on { "1" } else { "0" };
        w.write_record([
            r.target.to_string().as_str(),
            b(r.flags.episodic),
            b(r.flags.use_global),
            b(r.flags.use_local),
            r.seed.to_string().as_str(),
            acc.as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics_csv(path: &Path, history: &[MetricsRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    if history.is_empty() {
        w.write_record(METRICS_HEADER)?;
    }
    for rec in history {
        w.serialize(rec)?;
    }
    w.flush()?;
    Ok(())
}

pub const METRICS_HEADER: [&str; 12] = [
    "iteration",
    "task_loss",
    "global_loss",
    "local_loss",
    "meta_loss",
    "inner_lr",
    "outer_lr",
    "metric_lr",
    "grad_norm",
    "metric_grad_norm",
    "margin",
    "target_alignment",
];

/// Reads one named column of a metrics file as `(iteration, value)` points, skipping blanks.
pub fn read_metrics_column(path: &Path, column: &str) -> Result<Vec<(f64, f64)>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Format(format!("{}: no column {name}", path.display())))
    };
    let (xi, yi) = (find("iteration")?, find(column)?);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let (x, y) = (rec.get(xi).unwrap_or(""), rec.get(yi).unwrap_or(""));
        if y.is_empty() {
            continue;
        }
        let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("{}: {e}", path.display())));
        out.push((parse(x)?, parse(y)?));
    }
    Ok(out)
}

/// Mean curve over runs, aligned by iteration.
fn mean_curve<F: Fn(&MetricsRecord) -> Option<f64>>(runs: &[&RunResult], f: F) -> Vec<(f64, f64)> {
    let mut acc: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for r in runs {
        for rec in &r.history {
            if let Some(v) = f(rec) {
                let e = acc.entry(rec.iteration).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
        }
    }
    acc.into_iter().map(|(t, (s, n))| (t as f64, s / n as f64)).collect()
}

fn write_plots(dir: &Path, report: &Report) -> Result<()> {
    for target in report.targets() {
        for (name, label, f) in [
            ("margin", "distance margin", (|r: &MetricsRecord| r.margin) as fn(&MetricsRecord) -> Option<f64>),
            ("alignment", "target alignment loss", |r: &MetricsRecord| r.target_alignment),
        ] {
            let series: Vec<Series> = report
                .rows()
                .into_iter()
                .filter(|f| *f == AblationFlags::DEEP_ALL || *f == AblationFlags::FULL)
                .map(|flags| {
                    let runs: Vec<&RunResult> = report.runs.iter().filter(|r| r.flags == flags && r.target == target).collect();
                    let tag = if flags == AblationFlags::FULL { "MASF".to_string() } else { "DeepAll".to_string() };
                    Series { name: tag, points: mean_curve(&runs, f) }
                })
                .collect();
            if series.is_empty() {
                continue;
            }
            let svg = line_chart(&format!("{label}, target {target}"), "iteration", label, &series);
            fs::write(dir.join(format!("{name}_t{target}.svg")), svg)?;
        }
    }
    Ok(())
}

/// Runs every (target, row, seed) combination, then writes all artifacts.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let spec = BenchmarkSpec::load(&cfg.benchmark)?;
    run_experiment_with(cfg, &spec)
}

/// Like [`run_experiment`] with an already-loaded benchmark spec.
pub fn run_experiment_with(cfg: &ExperimentConfig, spec: &BenchmarkSpec) -> Result<Report> {
    cfg.validate()?;
    spec.validate()?;
    if spec.latent.input_dim != cfg.arch.input_dim || spec.latent.num_classes != cfg.arch.num_classes {
        return Err(Error::config("architecture input/output sizes do not match the benchmark"));
    }
    let domains = prepare_domains(spec, cfg.train_fraction)?;
    cfg.hyper.validate(domains.len() - 1, cfg.arch.num_classes)?;
    let ids: Vec<usize> = (0..domains.len()).collect();
    let mut splits = leave_one_out_splits(&ids)?;
    if !cfg.targets.is_empty() {
        if let Some(t) = cfg.targets.iter().find(|&&t| t >= domains.len()) {
            return Err(Error::config(format!("target {t} out of range")));
        }
        splits.retain(|s| cfg.targets.contains(&s.target));
    }

    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.resolved.toml"), cfg.to_toml())?;
    fs::write(out.join("benchmark.resolved.toml"), spec.to_toml())?;

    let jobs: Vec<(&LeaveOneOut, AblationFlags, u64)> = splits
        .iter()
        .flat_map(|s| cfg.rows.iter().flat_map(move |&f| cfg.seeds.iter().map(move |&seed| (s, f, seed))))
        .collect();
    let threads = match cfg.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(jobs.len());
    let slots: Vec<Mutex<Option<RunResult>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(split, flags, seed)) = jobs.get(i) else { break };
                let res = run_single(cfg, &domains, split, flags, seed);
                log::info!(
                    "{} accuracy {}",
                    res.run_id(),
                    res.accuracy.map_or("failed".into(), |a| format!("{a:.4}"))
                );
                *slots[i].lock().expect("slot lock") = Some(res);
            });
        }
    });
    let runs: Vec<RunResult> = slots.into_iter().map(|m| m.into_inner().expect("slot lock").expect("every job ran")).collect();

    for r in &runs {
        write_metrics_csv(&out.join("runs").join(r.run_id()).join("metrics.csv"), &r.history)?;
    }
    write_report_csv(&out.join("report.csv"), &runs)?;
    let report = Report { runs, output_dir: out.clone() };
    fs::write(out.join("summary.txt"), report.table())?;
    if cfg.plots {
        write_plots(out, &report)?;
    }
    Ok(report)
}
