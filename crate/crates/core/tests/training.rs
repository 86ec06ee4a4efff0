use std::path::PathBuf;

use masf_core::bench::{BenchmarkSpec, DomainDataset, DomainSpec, LatentSpec};
use masf_core::episodic::{mean_task_loss, AblationFlags, EpisodeState, Hyperparams};
use masf_core::harness::{
    evaluate_accuracy, margin_statistic, prepare_domains, read_metrics_column, run_experiment_with, target_alignment,
    ExperimentConfig, METRICS_HEADER,
};
use masf_core::nets::{init_params, Architecture};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy_spec(num_domains: usize, samples: usize) -> BenchmarkSpec {
    let latent = LatentSpec {
        input_dim: 16,
        num_classes: 5,
        rotation_plane: [0, 1],
        plane_radius: 2.0,
        center_scale: 0.5,
        within_class_sigma: 0.8,
    };
    let domains = (0..num_domains)
        .map(|k| {
            let mut d = DomainSpec::identity(k, samples);
            d.rotation_deg = 25.0 * k as f64;
            d.noise_sigma = 0.2;
            d
        })
        .collect();
    BenchmarkSpec { name: "toy".into(), base_seed: 42, latent, domains }
}

fn toy_hyper() -> Hyperparams {
    Hyperparams { inner_lr: 0.05, outer_lr: 0.05, metric_lr: 0.05, beta_local: 0.5, batch_size: 32, ..Hyperparams::default() }
}

fn canonical() -> BenchmarkSpec {
    BenchmarkSpec::load(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../bench/specs/canonical.toml")).unwrap()
}

#[test]
fn one_iteration_one_record() {
    let data = toy_spec(3, 60).generate().unwrap();
    let mut st = EpisodeState::new(Architecture::default(), toy_hyper(), AblationFlags::FULL, 0).unwrap();
    let mut records = Vec::new();
    st.train(&data, 1, |_, r| {
        records.push(r);
        Ok(())
    })
    .unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].iteration, 1);
    assert!(records[0].global_loss.is_some() && records[0].local_loss.is_some());
}

#[test]
fn zero_iterations_is_an_error() {
    let data = toy_spec(3, 60).generate().unwrap();
    let mut st = EpisodeState::new(Architecture::default(), toy_hyper(), AblationFlags::FULL, 0).unwrap();
    assert!(st.train(&data, 0, |_, _| Ok(())).is_err());
}

#[test]
fn held_out_task_loss_decreases() {
    let spec = toy_spec(3, 200);
    let domains = prepare_domains(&spec, 0.7).unwrap();
    let train: Vec<DomainDataset> = domains.iter().map(|d| d.train.clone()).collect();
    let held: Vec<_> = domains.iter().map(|d| d.held_out.as_batch()).collect();
    let held_refs: Vec<_> = held.iter().collect();
    let mut st = EpisodeState::new(Architecture::default(), toy_hyper(), AblationFlags::FULL, 1).unwrap();
    let initial = mean_task_loss(&st.psi, &st.theta, &held_refs).unwrap().item();
    let mut curve = Vec::new();
    st.train(&train, 500, |s, r| {
        if r.iteration % 25 == 0 {
            curve.push(mean_task_loss(&s.psi, &s.theta, &held_refs)?.item());
        }
        Ok(())
    })
    .unwrap();
    let trailing = curve[curve.len() - 5..].iter().sum::<f64>() / 5.0;
    let early = curve[..5].iter().sum::<f64>() / 5.0;
    assert!(trailing < initial && trailing < early, "initial {initial}, early {early}, trailing {trailing}");
}

#[test]
fn trained_beats_untrained_on_canonical() {
    let domains = prepare_domains(&canonical(), 0.7).unwrap();
    let sources: Vec<DomainDataset> = domains[..3].iter().map(|d| d.train.clone()).collect();
    let target = &domains[3].full;
    let hyper = Hyperparams { outer_lr: 0.05, batch_size: 64, ..Hyperparams::default() };
    for seed in 0..5 {
        let mut st = EpisodeState::new(Architecture::default(), hyper.clone(), AblationFlags::DEEP_ALL, seed).unwrap();
        let before = evaluate_accuracy(&st.psi, &st.theta, target).unwrap();
        st.train(&sources, 150, |_, _| Ok(())).unwrap();
        let after = evaluate_accuracy(&st.psi, &st.theta, target).unwrap();
        assert!(after > before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn margin_is_symmetric_in_its_domains() {
    let data = toy_spec(2, 150).generate().unwrap();
    for seed in 0..4 {
        let (psi, _, phi) = init_params(&Architecture::default(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ab = margin_statistic(&psi, &phi, &data[0], &data[1], 4000, &mut rng).unwrap();
        let ba = margin_statistic(&psi, &phi, &data[1], &data[0], 4000, &mut rng).unwrap();
        let se = (ab.std_err.powi(2) + ba.std_err.powi(2)).sqrt();
        assert!((ab.mean - ba.mean).abs() < 2.0 * se, "seed {seed}: {ab:?} vs {ba:?}");
    }
}

#[test]
fn untrained_alignment_between_distinct_domains_is_positive() {
    let data = toy_spec(2, 100).generate().unwrap();
    let (psi, theta, _) = init_params(&Architecture::default(), 3).unwrap();
    assert!(target_alignment(&psi, &theta, &data[0], &data[1], 2.0).unwrap() > 0.0);
    assert!(target_alignment(&psi, &theta, &data[0], &data[0], 2.0).unwrap().abs() < 1e-15);
}

fn small_config(out: PathBuf) -> ExperimentConfig {
    ExperimentConfig {
        output_dir: out,
        seeds: vec![0],
        iterations: Some(12),
        eval_every: 5,
        margin_pairs: 50,
        rows: vec![AblationFlags::DEEP_ALL, AblationFlags::FULL],
        hyper: toy_hyper(),
        ..ExperimentConfig::default()
    }
}

#[test]
fn experiment_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path().to_path_buf());
    let report = run_experiment_with(&cfg, &toy_spec(4, 80)).unwrap();
    assert_eq!(report.runs.len(), 4 * 2);
    assert!(report.runs.iter().all(|r| !r.failed()));
    assert!(report.runs.iter().all(|r| (0.0..=1.0).contains(&r.accuracy.unwrap())));

    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("target,episodic,global,local,seed,accuracy"));
    assert_eq!(lines.count(), 8);
    assert_eq!(lines_of(&csv)[1].split(',').take(5).collect::<Vec<_>>(), ["0", "0", "0", "0", "0"]);

    let metrics = dir.path().join("runs").join(report.runs[1].run_id()).join("metrics.csv");
    let text = std::fs::read_to_string(&metrics).unwrap();
    assert_eq!(text.lines().next().unwrap(), METRICS_HEADER.join(","));
    assert_eq!(text.lines().count(), 1 + 12);
    let margins = read_metrics_column(&metrics, "margin").unwrap();
    assert_eq!(margins.iter().map(|p| p.0).collect::<Vec<_>>(), [5.0, 10.0, 12.0]);

    assert!(dir.path().join("config.resolved.toml").exists());
    let resolved = ExperimentConfig::load(&dir.path().join("config.resolved.toml")).unwrap();
    assert_eq!(resolved.hyper, cfg.hyper);
    for t in 0..4 {
        let svg = std::fs::read_to_string(dir.path().join(format!("margin_t{t}.svg"))).unwrap();
        assert!(svg.contains("MASF") && svg.contains("DeepAll"));
        assert!(dir.path().join(format!("alignment_t{t}.svg")).exists());
    }
    // one seed: no standard deviation
    assert!(report.average_accuracy(AblationFlags::FULL).unwrap().std.is_none());
    assert!(report.table().contains("n/a"));
}

fn lines_of(s: &str) -> Vec<&str> {
    s.lines().collect()
}

#[test]
fn diverging_rows_are_marked_failed_and_the_rest_finish() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path().to_path_buf());
    cfg.targets = vec![0];
    cfg.rows = vec![AblationFlags::DEEP_ALL, AblationFlags { episodic: false, use_global: false, use_local: true }];
    cfg.hyper.beta_local = 1e300;
    cfg.hyper.clip_outer = false;
    let report = run_experiment_with(&cfg, &toy_spec(4, 60)).unwrap();
    assert!(!report.runs[0].failed());
    assert!(report.runs[1].failed(), "{:?}", report.runs[1].error);
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(csv.lines().nth(2).unwrap().ends_with(",failed"));
    assert!(report.table().contains("failed"));
}

#[test]
fn invalid_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path().to_path_buf());
    cfg.arch.input_dim = 7;
    assert!(run_experiment_with(&cfg, &toy_spec(3, 60)).is_err());
    let mut cfg = small_config(dir.path().to_path_buf());
    cfg.targets = vec![9];
    assert!(run_experiment_with(&cfg, &toy_spec(3, 60)).is_err());
    let mut cfg = small_config(dir.path().to_path_buf());
    cfg.hyper.n_meta_train = 3;
    assert!(run_experiment_with(&cfg, &toy_spec(3, 60)).is_err());
}
