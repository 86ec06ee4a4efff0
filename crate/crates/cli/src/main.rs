//! `masf` command-line runner.
//!
//! Exit codes: 0 success, 1 config error, 2 run failure, 3 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use masf_core::bench::{leave_one_out_splits, write_csv, BenchmarkSpec};
use masf_core::episodic::{load_checkpoint, AblationFlags};
use masf_core::harness::{
    embed, evaluate_accuracy, prepare_domains, read_metrics_column, run_experiment, run_single_with_state, silhouette_score,
    svg::{line_chart, Series},
    write_metrics_csv, ExperimentConfig,
};
use masf_core::Error;

#[derive(Parser)]
#[command(name = "masf", version, about = "Meta-learning domain generalization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Benchmark utilities.
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
    /// Train one configuration on one leave-one-domain-out split.
    Train(TrainArgs),
    /// Evaluate a saved checkpoint on one domain.
    Eval(EvalArgs),
    /// Run the ablation grid over every split and seed.
    Ablate(AblateArgs),
    /// Plot columns of a metrics.csv file as SVG.
    Plot(PlotArgs),
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Generate a benchmark and write it as CSV.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Overrides {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (`MASF_OUT_DIR` takes precedence over the config, this flag over both).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<u64>,
    /// Benchmark spec overriding the config.
    #[arg(long)]
    benchmark: Option<PathBuf>,
}

impl Overrides {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config).with_context(|| format!("loading {}", self.config.display()))?;
        cfg.apply_env();
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(it) = self.iterations {
            cfg.iterations = Some(it);
        }
        if let Some(b) = &self.benchmark {
            cfg.benchmark = b.clone();
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Overrides,
    #[arg(long)]
    target: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Ablation row such as `EGL` (full method) or `---` (DeepAll).
    #[arg(long, default_value = "EGL", value_parser = parse_flags)]
    flags: AblationFlags,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory holding psi.bin, theta.bin and phi.bin.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    benchmark: PathBuf,
    /// Domain id to evaluate on.
    #[arg(long)]
    domain: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Overrides,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated ablation rows, e.g. `---,EGL`.
    #[arg(long, value_delimiter = ',', value_parser = parse_flags)]
    rows: Option<Vec<AblationFlags>>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    no_plots: bool,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    metrics: PathBuf,
    /// Column to plot; repeatable.
    #[arg(long = "column", required = true)]
    columns: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_flags(s: &str) -> Result<AblationFlags, String> {
    let chars: Vec<char> = s.chars().collect();
    let ok = chars.len() == 3
        && matches!(chars[0], 'E' | '-')
        && matches!(chars[1], 'G' | '-')
        && matches!(chars[2], 'L' | '-');
    if !ok {
        return Err(format!("expected a row like EGL, E--, -G- or ---, got {s:?}"));
    }
    Ok(AblationFlags { episodic: chars[0] == 'E', use_global: chars[1] == 'G', use_local: chars[2] == 'L' })
}

/// Failure carrying its exit code.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::Data(_) => 1,
                Error::NonFinite(_) | Error::Autodiff(_) => 2,
                Error::Io(_) | Error::Csv(_) | Error::Format(_) => 3,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        Self { code: exit_code(&err), err }
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        anyhow::Error::from(err).into()
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Bench { command: BenchCommand::Gen { spec, out } } => bench_gen(&spec, &out),
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Ablate(args) => ablate(args),
        Command::Plot(args) => plot(args),
    }
}

fn bench_gen(spec: &Path, out: &Path) -> Result<(), Failure> {
    let spec = BenchmarkSpec::load(spec)?;
    let data = spec.generate()?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
    }
    write_csv(out, &data)?;
    for d in &data {
        println!("domain {}: {} samples, class counts {:?}", d.domain, d.len(), d.class_counts());
    }
    Ok(())
}

fn train(args: TrainArgs) -> Result<(), Failure> {
    let cfg = args.common.load()?;
    cfg.validate()?;
    let spec = BenchmarkSpec::load(&cfg.benchmark)?;
    spec.validate()?;
    let domains = prepare_domains(&spec, cfg.train_fraction)?;
    cfg.hyper.validate(domains.len() - 1, cfg.arch.num_classes)?;
    let ids: Vec<usize> = (0..domains.len()).collect();
    let split = leave_one_out_splits(&ids)?
        .into_iter()
        .find(|s| s.target == args.target)
        .ok_or_else(|| Error::Config(format!("target {} out of range", args.target)))?;

    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(Error::from)?;
    std::fs::write(out.join("config.resolved.toml"), cfg.to_toml()).map_err(Error::from)?;
    let (res, state) = run_single_with_state(&cfg, &domains, &split, args.flags, args.seed);
    let run_dir = out.join("runs").join(res.run_id());
    write_metrics_csv(&run_dir.join("metrics.csv"), &res.history)?;
    let Some(state) = state else {
        return Err(Failure { code: 2, err: anyhow::anyhow!("run failed: {}", res.error.unwrap_or_default()) });
    };
    let ckpt = state.save_checkpoint(&out.join("runs"), &res.run_id())?;
    println!("checkpoint {}", ckpt.display());
    println!("target {} accuracy {:.4}", res.target, res.accuracy.unwrap_or(f64::NAN));
    if let (Some(m), Some(a), Some(s)) = (res.margin, res.alignment, res.silhouette) {
        println!("margin {m:.4} alignment {a:.4} silhouette {s:.4}");
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), Failure> {
    let (psi, theta, phi) = load_checkpoint(&args.checkpoint)?;
    let spec = BenchmarkSpec::load(&args.benchmark)?;
    let data = spec.generate()?;
    let ds = data
        .iter()
        .find(|d| d.domain == args.domain)
        .ok_or_else(|| Error::Config(format!("no domain {}", args.domain)))?;
    let acc = evaluate_accuracy(&psi, &theta, ds)?;
    let sil = silhouette_score(&embed(&psi, &phi, ds)?, &ds.labels)?;
    println!("domain {} accuracy {acc:.4} silhouette {sil:.4}", args.domain);
    Ok(())
}

fn ablate(args: AblateArgs) -> Result<(), Failure> {
    let mut cfg = args.common.load()?;
    if let Some(seeds) = args.seeds {
        cfg.seeds = seeds;
    }
    if let Some(rows) = args.rows {
        cfg.rows = rows;
    }
    if let Some(t) = args.threads {
        cfg.threads = t;
    }
    if args.no_plots {
        cfg.plots = false;
    }
    let report = run_experiment(&cfg)?;
    print!("{}", report.table());
    println!("report {}", report.output_dir.join("report.csv").display());
    let failed = report.runs.iter().filter(|r| r.failed()).count();
    if failed > 0 {
        return Err(Failure { code: 2, err: anyhow::anyhow!("{failed} run(s) failed") });
    }
    Ok(())
}

fn plot(args: PlotArgs) -> Result<(), Failure> {
    let series = args
        .columns
        .iter()
        .map(|c| Ok(Series { name: c.clone(), points: read_metrics_column(&args.metrics, c)? }))
        .collect::<Result<Vec<_>, Error>>()?;
    let title = args.metrics.display().to_string();
    std::fs::write(&args.out, line_chart(&title, "iteration", "value", &series)).map_err(Error::from)?;
    println!("wrote {}", args.out.display());
    Ok(())
}
