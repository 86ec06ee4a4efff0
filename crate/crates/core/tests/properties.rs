use masf_core::autodiff::{clip_by_norm, finite_diff_check, grad, Expr, GradMap, Tensor};
use masf_core::bench::{sample_batch, BenchmarkSpec, Batch, DomainSpec, LatentSpec};
use masf_core::episodic::{decayed_lr, split_domains, AblationFlags, EpisodeState, Hyperparams};
use masf_core::harness::silhouette_score;
use masf_core::losses::{
    class_means, contrastive_loss, global_alignment_loss, soft_labels, symm_kl, task_loss, triplet_loss_semihard,
};
use masf_core::nets::{feature_forward, init_params, metric_forward, sgd_step, task_forward, Architecture, ParamSet};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| Tensor::new(vec![rows, cols], v).unwrap())
}

fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..1.0, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

/// A smooth scalar touching most differentiable ops.
fn composite(x: &Expr, w: &Expr) -> Expr {
    let h = x.matmul(w).unwrap();
    let a = h.log_softmax().unwrap().sum();
    let b = h.square().add(&Expr::scalar(1.0)).unwrap().sqrt().unwrap().sum();
    let c = x.square().add(&Expr::scalar(1.0)).unwrap().ln().unwrap().mean();
    let d = h.exp().div(&x.sum_axis(1).unwrap().square().add(&Expr::scalar(2.0)).unwrap().unsqueeze_last().unwrap()).unwrap().sum();
    let e = w.transpose().unwrap().mul(&w.transpose().unwrap()).unwrap().neg().sum().scale(0.3);
    a.add(&b).unwrap().add(&c).unwrap().add(&d.scale(0.1)).unwrap().add(&e).unwrap()
}

fn small_arch() -> Architecture {
    Architecture { input_dim: 3, feature_widths: vec![5, 4], num_classes: 3, metric_widths: vec![4, 2] }
}

fn permuted(t: &Tensor, labels: &[usize], perm: &[usize]) -> (Tensor, Vec<usize>) {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| t.row(i).to_vec()).collect();
    (Tensor::from_rows(&rows), perm.iter().map(|&i| labels[i]).collect())
}

fn batch_strategy(n: usize, d: usize, c: usize) -> impl Strategy<Value = Batch> {
    (matrix(n, d), Just(())).prop_map(move |(x, _)| Batch { domain: 0, x, labels: (0..n).map(|i| i % c).collect() })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gradients_match_finite_differences(x in matrix(3, 4), w in matrix(4, 3)) {
        let (x, w) = (Expr::leaf(x), Expr::leaf(w));
        let f = composite(&x, &w);
        prop_assert!(finite_diff_check(&f, &[x, w], 1e-5).unwrap() <= 1e-5);
    }

    #[test]
    fn second_order_matches_finite_differences(x in matrix(2, 3), w in matrix(3, 2), c in matrix(2, 3)) {
        let (x, w) = (Expr::leaf(x), Expr::leaf(w));
        let gx = grad(&composite(&x, &w), std::slice::from_ref(&x)).unwrap();
        let s = gx.get(&x).unwrap().mul(&Expr::leaf(c)).unwrap().sum();
        prop_assert!(finite_diff_check(&s, &[x, w], 1e-5).unwrap() <= 1e-4);
    }

    #[test]
    fn gradient_is_linear(x in matrix(3, 4), w in matrix(4, 3), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let (x, w) = (Expr::leaf(x), Expr::leaf(w));
        let f = composite(&x, &w);
        let g = x.matmul(&w).unwrap().relu().square().sum();
        let combined = grad(&f.scale(a).add(&g.scale(b)).unwrap(), &[x.clone(), w.clone()]).unwrap();
        let gf = grad(&f, &[x.clone(), w.clone()]).unwrap();
        let gg = grad(&g, &[x.clone(), w.clone()]).unwrap();
        for p in [&x, &w] {
            let lhs = combined.get(p).unwrap().value();
            let (u, v) = (gf.get(p).unwrap().value(), gg.get(p).unwrap().value());
            for k in 0..lhs.numel() {
                prop_assert!((lhs.data()[k] - (a * u.data()[k] + b * v.data()[k])).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn clipping_bounds_norm_and_is_idempotent(g in prop::collection::vec(-10.0f64..10.0, 1..12), thr in 0.1f64..5.0) {
        let p = Expr::leaf(Tensor::zeros(&[g.len()]));
        let map = GradMap::from_entries(vec![(p, Expr::leaf(Tensor::from_vec(g)))]);
        let once = clip_by_norm(&map, thr).unwrap();
        prop_assert!(once.global_norm() <= thr + 1e-12);
        let twice = clip_by_norm(&once, thr).unwrap();
        let (a, b) = (once.grads().next().unwrap().value(), twice.grads().next().unwrap().value());
        for (u, v) in a.data().iter().zip(b.data()) {
            prop_assert!((u - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn evaluation_is_deterministic(x in matrix(3, 4), w in matrix(4, 3)) {
        let f = composite(&Expr::leaf(x), &Expr::leaf(w));
        let none = Default::default();
        let (a, b) = (f.evaluate_with(&none).unwrap(), f.evaluate_with(&none).unwrap());
        prop_assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());
        prop_assert_eq!(a.data()[0].to_bits(), f.item().to_bits());
    }

    #[test]
    fn forward_passes_leave_params_untouched(x in matrix(4, 3), seed in 0u64..1000) {
        let (psi, theta, phi) = init_params(&small_arch(), seed).unwrap();
        let snapshot = |p: &ParamSet| p.exprs().iter().map(|e| e.value().clone()).collect::<Vec<_>>();
        let before = (snapshot(&psi), snapshot(&theta), snapshot(&phi));
        let z = feature_forward(&psi, &Expr::leaf(x)).unwrap();
        let _ = task_forward(&theta, &z).unwrap().sum();
        let _ = metric_forward(&phi, &z).unwrap();
        prop_assert_eq!(before, (snapshot(&psi), snapshot(&theta), snapshot(&phi)));
    }

    #[test]
    fn sgd_there_and_back(seed in 0u64..1000, lr in 1e-3f64..1.0, x in matrix(4, 3)) {
        let (psi, theta, _) = init_params(&small_arch(), seed).unwrap();
        let loss = task_forward(&theta, &feature_forward(&psi, &Expr::leaf(x)).unwrap()).unwrap().square().sum();
        let g = grad(&loss, &psi.exprs()).unwrap();
        let g = GradMap::from_entries(g.iter().map(|(p, g)| (p.clone(), g.detach())).collect());
        let there = sgd_step(&psi, &g, lr).unwrap().detach();
        let back_g = GradMap::from_entries(there.exprs().into_iter().zip(g.grads().cloned()).collect());
        let back = sgd_step(&there, &back_g, -lr).unwrap();
        prop_assert!(back.distance(&psi) <= 1e-12);
    }

    #[test]
    fn losses_are_nonnegative(x in matrix(9, 3), seed in 0u64..1000) {
        let (psi, theta, phi) = init_params(&small_arch(), seed).unwrap();
        let labels: Vec<usize> = (0..9).map(|i| i % 3).collect();
        let z = feature_forward(&psi, &Expr::leaf(x.clone())).unwrap();
        let emb = metric_forward(&phi, &z).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert!(task_loss(&task_forward(&theta, &z).unwrap(), &labels).unwrap().item() >= 0.0);
        prop_assert!(contrastive_loss(&emb, &labels, 1.0, &mut rng).unwrap().item() >= 0.0);
        prop_assert!(triplet_loss_semihard(&emb, &labels, 1.0).unwrap().item() >= 0.0);
        let a = Batch { domain: 0, x: x.clone(), labels: labels.clone() };
        let b = Batch { domain: 1, x: x.map(|v| v * 0.5 + 0.1), labels };
        prop_assert!(global_alignment_loss(&[&a], &[&b], &psi, &theta, 3, 2.0).unwrap().item() >= 0.0);
    }

    #[test]
    fn symm_kl_is_symmetric(p in distribution(4), q in distribution(4)) {
        let (p, q) = (Expr::leaf(Tensor::from_vec(p)), Expr::leaf(Tensor::from_vec(q)));
        let (pq, qp) = (symm_kl(&p, &q).unwrap().item(), symm_kl(&q, &p).unwrap().item());
        prop_assert!((pq - qp).abs() <= 1e-15 && pq >= 0.0);
        prop_assert!(symm_kl(&p, &p).unwrap().item().abs() <= 1e-15);
    }

    #[test]
    fn global_alignment_is_symmetric(a in batch_strategy(6, 3, 3), b in batch_strategy(6, 3, 3), seed in 0u64..100) {
        let (psi, theta, _) = init_params(&small_arch(), seed).unwrap();
        let ab = global_alignment_loss(&[&a], &[&b], &psi, &theta, 3, 2.0).unwrap().item();
        let ba = global_alignment_loss(&[&b], &[&a], &psi, &theta, 3, 2.0).unwrap().item();
        prop_assert!((ab - ba).abs() <= 1e-14);
    }

    #[test]
    fn soft_labels_are_distributions(z in matrix(5, 4), tau in 1.0f64..50.0, seed in 0u64..100) {
        let (_, theta, _) = init_params(&small_arch(), seed).unwrap();
        let z = Expr::leaf(z);
        let p = soft_labels(&theta, &z, tau).unwrap();
        for r in 0..5 {
            prop_assert!((p.value().row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        let flat = soft_labels(&theta, &z, 1e6).unwrap();
        prop_assert!(flat.value().data().iter().all(|v| (v - 1.0 / 3.0).abs() <= 1e-4));
    }

    #[test]
    fn batch_permutation_invariance(x in matrix(9, 3), y in matrix(9, 3), perm in Just((0..9).collect::<Vec<usize>>()).prop_shuffle(), seed in 0u64..100) {
        let (psi, theta, phi) = init_params(&small_arch(), seed).unwrap();
        let labels: Vec<usize> = (0..9).map(|i| (i * 7) % 3).collect();
        let (xp, lp) = permuted(&x, &labels, &perm);
        let z = feature_forward(&psi, &Expr::leaf(x.clone())).unwrap();
        let zp = feature_forward(&psi, &Expr::leaf(xp.clone())).unwrap();

        let t = task_loss(&task_forward(&theta, &z).unwrap(), &labels).unwrap().item();
        let tp = task_loss(&task_forward(&theta, &zp).unwrap(), &lp).unwrap().item();
        prop_assert!((t - tp).abs() <= 1e-12);

        let (m, mp) = (class_means(&z, &labels, 3).unwrap(), class_means(&zp, &lp, 3).unwrap());
        for (u, v) in m.means.value().data().iter().zip(mp.means.value().data()) {
            prop_assert!((u - v).abs() <= 1e-12);
        }

        let other = Batch { domain: 1, x: y, labels: labels.clone() };
        let a = Batch { domain: 0, x, labels: labels.clone() };
        let ap = Batch { domain: 0, x: xp, labels: lp.clone() };
        let g = global_alignment_loss(&[&a], &[&other], &psi, &theta, 3, 2.0).unwrap().item();
        let gp = global_alignment_loss(&[&ap], &[&other], &psi, &theta, 3, 2.0).unwrap().item();
        prop_assert!((g - gp).abs() <= 1e-12);

        let tr = triplet_loss_semihard(&metric_forward(&phi, &z).unwrap(), &labels, 1.0).unwrap().item();
        let trp = triplet_loss_semihard(&metric_forward(&phi, &zp).unwrap(), &lp, 1.0).unwrap().item();
        prop_assert!((tr - trp).abs() <= 1e-12);
    }

    #[test]
    fn domain_splits_partition(k in 2usize..8, seed in 0u64..1000) {
        let domains: Vec<usize> = (10..10 + k).collect();
        let n_train = 1 + (seed as usize) % (k - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (tr, te) = split_domains(&domains, n_train, k - n_train, &mut rng).unwrap();
        prop_assert_eq!(tr.len(), n_train);
        prop_assert!(tr.iter().all(|d| !te.contains(d)));
        let mut all: Vec<usize> = tr.into_iter().chain(te).collect();
        all.sort_unstable();
        prop_assert_eq!(all, domains);
    }

    #[test]
    fn decay_is_non_increasing(lr in 1e-6f64..1.0, rate in 0.0f64..0.99, every in 1u64..50, t in 0u64..10_000) {
        prop_assert!(decayed_lr(lr, t + 1, rate, every) <= decayed_lr(lr, t, rate, every));
    }

    #[test]
    fn stratified_batches_cover_every_class(n_per in 2usize..20, bs_extra in 0usize..20, seed in 0u64..1000) {
        let latent = LatentSpec { input_dim: 4, num_classes: 4, rotation_plane: [0, 1], plane_radius: 1.0, center_scale: 1.0, within_class_sigma: 0.5 };
        let spec = BenchmarkSpec { name: "p".into(), base_seed: seed, latent, domains: vec![DomainSpec::identity(0, 4 * n_per)] };
        let data = spec.generate().unwrap();
        let bs = (4 + bs_extra).min(data[0].len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = sample_batch(&data[0], bs, true, &mut rng).unwrap();
        prop_assert_eq!(batch.len(), bs);
        for c in 0..4 {
            prop_assert!(batch.labels.contains(&c));
        }
    }

    #[test]
    fn generation_is_pure(seed in 0u64..1000, rot in 0.0f64..180.0) {
        let latent = LatentSpec { input_dim: 5, num_classes: 3, rotation_plane: [1, 3], plane_radius: 2.0, center_scale: 1.0, within_class_sigma: 0.7 };
        let mut d = DomainSpec::identity(1, 30);
        d.rotation_deg = rot;
        d.noise_sigma = 0.3;
        let spec = BenchmarkSpec { name: "p".into(), base_seed: seed, latent, domains: vec![DomainSpec::identity(0, 20), d] };
        let (a, b) = (spec.generate().unwrap(), spec.generate().unwrap());
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(&x.labels, &y.labels);
            prop_assert!(x.features.data().iter().zip(y.features.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }

    #[test]
    fn noiseless_identity_domains_share_class_means(seed in 0u64..1000) {
        let latent = LatentSpec { input_dim: 4, num_classes: 3, rotation_plane: [0, 1], plane_radius: 1.5, center_scale: 1.0, within_class_sigma: 0.0 };
        let spec = BenchmarkSpec { name: "p".into(), base_seed: seed, latent, domains: vec![DomainSpec::identity(0, 12), DomainSpec::identity(1, 21)] };
        let data = spec.generate().unwrap();
        for c in 0..3 {
            let mean = |k: usize| {
                let d = &data[k];
                let idx: Vec<usize> = (0..d.len()).filter(|&i| d.labels[i] == c).collect();
                (0..4).map(|j| idx.iter().map(|&i| d.features.row(i)[j]).sum::<f64>() / idx.len() as f64).collect::<Vec<_>>()
            };
            let (m0, m1) = (mean(0), mean(1));
            prop_assert!(m0.iter().zip(&m1).all(|(u, v)| (u - v).abs() <= 1e-12));
        }
    }

    #[test]
    fn silhouette_invariances(pts in matrix(9, 2), angle in 0.0f64..6.3, relabel in Just(vec![0usize, 1, 2]).prop_shuffle()) {
        let labels: Vec<usize> = (0..9).map(|i| i % 3).collect();
        let base = silhouette_score(&pts, &labels).unwrap();
        prop_assert!((-1.0..=1.0).contains(&base));
        let renamed: Vec<usize> = labels.iter().map(|&y| relabel[y]).collect();
        prop_assert!((silhouette_score(&pts, &renamed).unwrap() - base).abs() <= 1e-12);
        let (s, c) = angle.sin_cos();
        let rotated: Vec<Vec<f64>> = (0..9).map(|i| { let r = pts.row(i); vec![c * r[0] - s * r[1], s * r[0] + c * r[1]] }).collect();
        prop_assert!((silhouette_score(&Tensor::from_rows(&rotated), &labels).unwrap() - base).abs() <= 1e-10);
    }
}

#[test]
fn every_ablation_row_sees_the_same_data_order() {
    let latent = LatentSpec { input_dim: 16, num_classes: 5, rotation_plane: [0, 1], plane_radius: 2.0, center_scale: 0.5, within_class_sigma: 0.8 };
    let domains = (0..3).map(|k| { let mut d = DomainSpec::identity(k, 60); d.rotation_deg = 20.0 * k as f64; d }).collect();
    let data = BenchmarkSpec { name: "rows".into(), base_seed: 5, latent, domains }.generate().unwrap();
    let hyper = Hyperparams { batch_size: 16, inner_lr: 0.05, outer_lr: 0.05, metric_lr: 0.05, ..Hyperparams::default() };
    let mut states: Vec<EpisodeState> = AblationFlags::grid()
        .into_iter()
        .map(|flags| EpisodeState::new(Architecture::default(), hyper.clone(), flags, 9).unwrap())
        .collect();
    for st in &mut states {
        st.train(&data, 6, |_, _| Ok(())).unwrap();
    }
    for st in &states[1..] {
        assert_eq!(st.data_rng, states[0].data_rng, "row {}", st.flags.label());
    }
}
