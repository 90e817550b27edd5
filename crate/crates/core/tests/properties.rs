use nalgebra::DVector;
use oedit_core::baselines::prune_rescale;
use oedit_core::editors::{rome_edit, PreparedCovariance};
use oedit_core::memory::{compose_key, decode, estimate_covariance, fit_ridge, synth_edit_stream, synth_model};
use oedit_core::metrics::{activation_scores, activation_scores_own, evaluate, sum_deltas};
use oedit_core::numerics::{ogd_orthogonalize, orthonormalize_columns, project_off};
use oedit_core::seeds::{gaussian_matrix, gaussian_vector, stream};
use oedit_core::subspace::{capture_gradient, SubspaceMemory};
use oedit_core::{run_sequence, CorpusConfig, MethodSpec};
use proptest::prelude::*;

fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    stream(seed, "properties", 0)
}

fn tiny_corpus(seed: u64) -> CorpusConfig {
    CorpusConfig {
        d: 24,
        d_m: 16,
        n_vocab: 32,
        n_pretrain: 12,
        n_heldout: 24,
        stream_budget: 12,
        rng_seed: seed,
        ..CorpusConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_is_idempotent_and_contracting(
        seed in any::<u64>(),
        rows in 2usize..12,
        cols in 1usize..8,
        dim in 0usize..6,
    ) {
        let mut r = rng(seed);
        let m = gaussian_matrix(&mut r, rows, cols, 1.0);
        let b = orthonormalize_columns(&gaussian_matrix(&mut r, rows, dim.min(rows), 1.0), 1e-10).unwrap();
        let once = project_off(&m, &b).unwrap();
        let twice = project_off(&once, &b).unwrap();
        prop_assert!((&twice - &once).norm() <= 1e-10 * (1.0 + m.norm()));
        prop_assert!(once.norm() <= m.norm() * (1.0 + 1e-12));
    }

    #[test]
    fn orthogonalised_gradient_still_descends(
        seed in any::<u64>(),
        n in 2usize..10,
        stored in 0usize..6,
    ) {
        let mut r = rng(seed);
        let a = gaussian_matrix(&mut r, n + 2, n, 1.0);
        let b = gaussian_vector(&mut r, n + 2, 1.0);
        let w = gaussian_vector(&mut r, n, 1.0);
        let grad = a.transpose() * (&a * &w - &b) * 2.0;
        let previous: Vec<DVector<f64>> = (0..stored).map(|_| gaussian_vector(&mut r, n, 1.0)).collect();
        let g = ogd_orthogonalize(&grad, &previous).unwrap();
        if g.norm() > 1e-12 * grad.norm() {
            prop_assert!(g.dot(&grad) >= -1e-12 * grad.norm_squared());
        }
    }

    #[test]
    fn decode_ignores_positive_scale(seed in any::<u64>(), alpha in 1e-3f64..1e3) {
        let mut r = rng(seed);
        let mut codebook = gaussian_matrix(&mut r, 9, 5, 1.0);
        for mut row in codebook.row_iter_mut() {
            let n = row.norm();
            row /= n;
        }
        let v = gaussian_vector(&mut r, 5, 1.0);
        prop_assert_eq!(decode(&(&v * alpha), &codebook).index, decode(&v, &codebook).index);
    }

    #[test]
    fn covariance_is_psd(seed in any::<u64>(), d_m in 1usize..10, n in 1usize..12) {
        let mut r = rng(seed);
        let keys = gaussian_matrix(&mut r, d_m, n, 1.0);
        let c = estimate_covariance(&keys, 3.0).unwrap();
        prop_assert!(c.symmetric_eigenvalues().iter().all(|&e| e >= -1e-10));
    }

    #[test]
    fn ridge_residual_shrinks_with_penalty(seed in any::<u64>(), d_m in 2usize..8, n in 1usize..12) {
        let mut r = rng(seed);
        let keys = gaussian_matrix(&mut r, d_m, n, 1.0);
        let values = gaussian_matrix(&mut r, 4, n, 1.0);
        let residual = |eps: f64| (fit_ridge(&keys, &values, eps).unwrap() * &keys - &values).norm();
        let mut last = f64::INFINITY;
        for eps in [1.0, 1e-1, 1e-2, 1e-3, 1e-6] {
            let now = residual(eps);
            prop_assert!(now <= last * (1.0 + 1e-9) + 1e-12);
            last = now;
        }
    }

    #[test]
    fn hard_constraint_edit_is_exact_and_rank_one(seed in any::<u64>(), d in 1usize..9, d_m in 1usize..9) {
        let mut r = rng(seed);
        let keys = gaussian_matrix(&mut r, d_m, d_m + 2, 1.0);
        let cov = PreparedCovariance::new(&(&keys * keys.transpose()), 2.0).unwrap();
        let mut model = synth_model(&tiny_corpus(1)).unwrap();
        model.weights = gaussian_matrix(&mut r, d, d_m, 1.0);
        let key = gaussian_vector(&mut r, d_m, 1.0);
        let value = gaussian_vector(&mut r, d, 1.0);
        let delta = rome_edit(&model, &cov, &key, &value).unwrap();
        let dense = delta.to_dense();
        let got = (&model.weights + &dense) * &key;
        prop_assert!((got - &value).norm() <= 1e-6 * value.norm());
        let sv = dense.singular_values();
        let mut sv: Vec<f64> = sv.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        if sv.len() > 1 && sv[0] > 0.0 {
            prop_assert!(sv[1] / sv[0] <= 1e-8);
        }
    }

    #[test]
    fn gradient_capture_leaves_weights_untouched(seed in any::<u64>()) {
        let mut r = rng(seed);
        let w = gaussian_matrix(&mut r, 5, 4, 1.0);
        let before: Vec<u64> = w.iter().map(|x| x.to_bits()).collect();
        let keys = gaussian_matrix(&mut r, 4, 6, 1.0);
        let values = gaussian_matrix(&mut r, 5, 6, 1.0);
        capture_gradient(&w, &keys, &values).unwrap();
        let after: Vec<u64> = w.iter().map(|x| x.to_bits()).collect();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn schedules_are_monotone_and_capped(
        seed in any::<u64>(),
        lambda3 in 0.5f64..4.0,
        q_cap in 0usize..40,
        steps in 1usize..20,
    ) {
        let mut r = rng(seed);
        let (d, d_m) = (10, 7);
        let g = gaussian_matrix(&mut r, d, d_m, 1.0);
        let mut mem = SubspaceMemory::new(d, d_m, g, lambda3, q_cap).unwrap();
        let (mut last_r, mut last_q) = (0, 0);
        for it in 1..=steps {
            mem.begin_iteration(it).unwrap();
            prop_assert!(mem.r() >= last_r && mem.q() >= last_q);
            prop_assert!(mem.q() <= d.min(d_m));
            let before = mem.grad_basis().clone();
            mem.deconflict();
            prop_assert!((before.columns() - mem.grad_basis().columns()).norm() <= 1e-12);
            (last_r, last_q) = (mem.r(), mem.q());
            let col = gaussian_vector(&mut r, d, 1.0);
            let row = gaussian_vector(&mut r, d_m, 1.0);
            let delta = oedit_core::EditDelta::rank_one(it, "p", col.clone(), row.clone(), col, row);
            mem.accumulate(&delta).unwrap();
        }
    }

    #[test]
    fn rescaling_never_raises_singular_values(seed in any::<u64>(), rows in 1usize..10, cols in 1usize..10, frac in 0.0f64..1.0) {
        let mut r = rng(seed);
        let m = gaussian_matrix(&mut r, rows, cols, 2.0);
        let mut before: Vec<f64> = m.singular_values().iter().copied().collect();
        before.sort_by(|a, b| b.total_cmp(a));
        let sigma_ref = (before[0] * frac).max(1e-6);
        let out = prune_rescale(&m, sigma_ref, 1.2).unwrap();
        let mut after: Vec<f64> = out.singular_values().iter().copied().collect();
        after.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in after.iter().zip(&before) {
            prop_assert!(*a <= *b * (1.0 + 1e-10) + 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn generated_edits_change_the_recalled_fact(seed in 0u64..1000) {
        let cfg = tiny_corpus(seed);
        let model = synth_model(&cfg).unwrap();
        for req in synth_edit_stream(&model, cfg.stream_budget, &cfg).unwrap() {
            let key = compose_key(&req).unwrap();
            prop_assert_ne!(model.decode_key(&key).unwrap().index, req.target_index);
        }
    }

    #[test]
    fn activation_scores_obey_triangle_inequality(seed in 0u64..1000) {
        let cfg = tiny_corpus(seed);
        let model = synth_model(&cfg).unwrap();
        let edits = synth_edit_stream(&model, 8, &cfg).unwrap();
        let out = run_sequence(&model, &edits, &MethodSpec::memit(), seed).unwrap();
        let total = sum_deltas(&out.deltas).unwrap();
        let others = activation_scores(&out.deltas).unwrap();
        let own = activation_scores_own(&out.deltas);
        for (j, d) in out.deltas.iter().enumerate() {
            prop_assert!((&total * &d.key).norm() <= others[j] + own[j] + 1e-9);
        }
    }

    #[test]
    fn scores_ignore_global_rescaling(seed in 0u64..1000, alpha in 0.1f64..10.0) {
        let cfg = tiny_corpus(seed);
        let model = synth_model(&cfg).unwrap();
        let edits = synth_edit_stream(&model, 6, &cfg).unwrap();
        let out = run_sequence(&model, &edits, &MethodSpec::memit(), seed).unwrap();
        let mut scaled = out.model.clone();
        scaled.weights *= alpha;
        let a = evaluate(&out.model, &model, &edits).unwrap();
        let b = evaluate(&scaled, &model, &edits).unwrap();
        prop_assert_eq!(a.rel, b.rel);
        prop_assert_eq!(a.gen, b.gen);
        // locality compares against the unscaled original
        let mut scaled_orig = model.clone();
        scaled_orig.weights *= alpha;
        let c = evaluate(&scaled, &scaled_orig, &edits).unwrap();
        prop_assert_eq!(a.loc, c.loc);
    }
}

#[test]
fn consecutive_update_cosine_falls_with_penalty() {
    let cfg = CorpusConfig {
        d: 64,
        d_m: 48,
        n_vocab: 96,
        n_pretrain: 32,
        n_heldout: 64,
        stream_budget: 40,
        ..CorpusConfig::default()
    };
    let model = synth_model(&cfg).unwrap();
    let edits = synth_edit_stream(&model, 40, &cfg).unwrap();
    let mut last = f64::INFINITY;
    for lambda in [0.0, 1.0, 10.0, 50.0] {
        let mut method = oedit_core::harness::desk_method(MethodSpec::o_edit(), &cfg);
        method.solver.lambda1 = lambda;
        method.solver.lambda2 = lambda;
        let out = run_sequence(&model, &edits, &method, 0).unwrap();
        let dirs: Vec<DVector<f64>> = out.deltas.iter().filter_map(|d| d.leading_direction()).collect();
        let cos = dirs.windows(2).map(|w| w[0].dot(&w[1]).abs()).sum::<f64>() / (dirs.len() - 1) as f64;
        assert!(cos <= last + 1e-12, "lambda {lambda}: {cos} after {last}");
        last = cos;
    }
}

#[test]
fn summary_rejects_mixed_configs() {
    use oedit_core::harness::{emit_summary, run_grid, ExperimentConfig};
    let dir = tempfile::tempdir().unwrap();
    let base = ExperimentConfig {
        corpus: tiny_corpus(0),
        methods: vec![MethodSpec::memit()],
        t_grid: vec![4],
        seeds: vec![0],
        output_dir: dir.path().to_path_buf(),
        ..ExperimentConfig::default()
    };
    let a = run_grid(&base).unwrap();
    let b = run_grid(&ExperimentConfig { seeds: vec![1], ..base }).unwrap();
    let mixed: Vec<_> = a.reports.into_iter().chain(b.reports).collect();
    assert!(emit_summary(&mixed).is_err());
}
