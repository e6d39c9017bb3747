use proptest::prelude::*;

use symlora::adapters::{init_lora, init_symlora, param_count, AdaptedLinear, Adapter, AdapterKind, BaseLinear};
use symlora::analysis::{norm_report, NormKind};
use symlora::model::{build_model, model_forward, InjectionPolicy, TinyTransformerConfig};
use symlora::numerics::{gaussian_matrix, singular_values, Matrix, SeededRng, Tape};
use symlora::tasks::{make_planted_task, PlantedLinearTask, SequenceTaskKind, ToySequenceTask};
use symlora::training::{train, AdamConfig, AdamState, Learner, TrainConfig};

fn randomize(adapter: &mut Adapter<f64>, rng: &mut SeededRng, std: f64) {
    let shapes: Vec<_> = adapter.tensors().iter().map(|(s, t)| (*s, t.shape())).collect();
    for (suffix, (rows, cols)) in shapes {
        adapter.set_tensor(suffix, gaussian_matrix(rows, cols, std, rng)).unwrap();
    }
}

fn random_layer(kind: AdapterKind, n: usize, m: usize, r: usize, rng: &mut SeededRng) -> AdaptedLinear<f64> {
    let w0 = gaussian_matrix(n, m, 1.0 / (m as f64).sqrt(), rng);
    let mut adapter = match kind {
        AdapterKind::Lora => Adapter::Lora(init_lora(n, m, r, r as f64, 0.02, rng).unwrap()),
        _ => Adapter::SymLora(init_symlora(n, r, r as f64, 0.02, rng).unwrap()),
    };
    randomize(&mut adapter, rng, 0.3);
    AdaptedLinear::with_adapter(BaseLinear::new(w0, 0, "p"), adapter).unwrap()
}

/// σ_{r+1}/σ_1, or 0 when the matrix is zero or has at most r singular values.
fn tail_ratio(m: &Matrix<f64>, r: usize) -> f64 {
    let s = singular_values(m).unwrap();
    if s.len() <= r || s[0] == 0.0 {
        0.0
    } else {
        s[r] / s[0]
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn frobenius_matches_singular_values(rows in 1usize..14, cols in 1usize..14, seed in any::<u64>()) {
        let a = gaussian_matrix::<f64>(rows, cols, 1.0, &mut SeededRng::new(seed));
        let f2 = a.frobenius_norm().powi(2);
        let s2: f64 = singular_values(&a).unwrap().iter().map(|s| s * s).sum();
        prop_assert!((f2 - s2).abs() <= 1e-10 * f2, "{f2} vs {s2}");
    }

    #[test]
    fn matmul_is_associative(seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let [a, b, c] = [0, 1, 2].map(|_| gaussian_matrix::<f64>(8, 8, 1.0, &mut rng));
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        let rel = left.max_abs_diff(&right).unwrap() / left.max_abs();
        prop_assert!(rel <= 1e-12, "relative {rel:e}");
    }

    #[test]
    fn rank_k_products_have_k_singular_values(n in 2usize..16, m in 2usize..16, k in 1usize..6, seed in any::<u64>()) {
        let k = k.min(n.min(m) - 1).max(1);
        let mut rng = SeededRng::new(seed);
        let u = gaussian_matrix::<f64>(n, k, 1.0, &mut rng);
        let v = gaussian_matrix::<f64>(k, m, 1.0, &mut rng);
        let ratio = tail_ratio(&u.matmul(&v).unwrap(), k);
        prop_assert!(ratio <= 1e-10, "ratio {ratio:e}");
    }

    #[test]
    fn symlora_update_is_symmetric_and_low_rank(n in 2usize..40, r in 1usize..6, scale in 0.01f64..10.0, seed in any::<u64>()) {
        let r = r.min(n);
        let mut rng = SeededRng::new(seed);
        let mut adapter = Adapter::SymLora(init_symlora(n, r, r as f64, 0.02, &mut rng).unwrap());
        randomize(&mut adapter, &mut rng, scale);
        let delta = adapter.delta_weight();
        prop_assert!(delta.asymmetry().unwrap() <= 1e-12);
        prop_assert!(tail_ratio(&delta, r) <= 1e-10);
    }

    #[test]
    fn init_forward_is_base_forward(n in 1usize..24, m in 1usize..24, r in 1usize..5, seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let w0 = gaussian_matrix::<f64>(n, m, 1.0, &mut rng);
        let x = gaussian_matrix::<f64>(m, 3, 10.0, &mut rng);
        let base = w0.matmul(&x).unwrap();
        let lora = init_lora(n, m, r.min(n.min(m)), 4.0, 0.02, &mut rng).unwrap();
        let layer = AdaptedLinear::with_adapter(BaseLinear::new(w0.clone(), 0, "p"), Adapter::Lora(lora)).unwrap();
        prop_assert!(layer.forward(&x).unwrap().max_abs_diff(&base).unwrap() <= 1e-12);
        if n == m {
            let sym = init_symlora(n, r.min(n), 4.0, 0.02, &mut rng).unwrap();
            let layer = AdaptedLinear::with_adapter(BaseLinear::new(w0, 0, "p"), Adapter::SymLora(sym)).unwrap();
            prop_assert!(layer.forward(&x).unwrap().max_abs_diff(&base).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn merge_matches_factored_forward(n in 1usize..257, r in 1usize..9, norm in 0.0f64..1e3, sym in any::<bool>(), seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let kind = if sym { AdapterKind::Symlora } else { AdapterKind::Lora };
        let layer = random_layer(kind, n, n, r.min(n), &mut rng);
        let mut x = gaussian_matrix::<f64>(n, 1, 1.0, &mut rng);
        let len = x.frobenius_norm();
        x = x.scale(norm / len);
        let merged = layer.merge().unwrap().matmul(&x).unwrap();
        prop_assert!(merged.max_abs_diff(&layer.forward(&x).unwrap()).unwrap() <= 1e-10);
    }

    #[test]
    fn detaching_restores_base_bitwise(n in 1usize..20, m in 1usize..20, sym in any::<bool>(), seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let kind = if sym { AdapterKind::Symlora } else { AdapterKind::Lora };
        let m = if sym { n } else { m };
        let mut layer = random_layer(kind, n, m, 1, &mut rng);
        let x = gaussian_matrix::<f64>(m, 4, 1.0, &mut rng);
        let base = layer.base().weight().matmul(&x).unwrap();
        layer.detach();
        prop_assert_eq!(layer.forward(&x).unwrap(), base);
    }

    #[test]
    fn parameter_ratio_formula(n in 1usize..2048, r in 1usize..64) {
        prop_assume!(r <= n);
        let mut rng = SeededRng::new(0);
        // Tiny shapes keep this cheap; counts depend only on (n, r).
        let sym = Adapter::SymLora(init_symlora::<f64>(n, r, 1.0, 0.02, &mut rng).unwrap());
        let lora = Adapter::Lora(init_lora::<f64>(n, n, r, 1.0, 0.02, &mut rng).unwrap());
        let (s, l) = (param_count(&sym, true), param_count(&lora, false));
        prop_assert_eq!(s, (n + 1) * r + 1);
        prop_assert_eq!(l, 2 * n * r);
        // ((n+1)r + 1) / 2nr < 0.51  <=>  r (n - 50) > 50.
        let below = (s as f64) / (l as f64) < 0.51;
        prop_assert_eq!(below, r * n > 50 * r + 50);
    }
}

#[test]
fn parameter_ratio_small_n_exceeds_point_51() {
    // The ratio only drops under 0.51 once r (n - 50) > 50; n = 32, r = 1 sits at 34/64.
    let mut rng = SeededRng::new(0);
    let sym = Adapter::SymLora(init_symlora::<f64>(32, 1, 1.0, 0.02, &mut rng).unwrap());
    let lora = Adapter::Lora(init_lora::<f64>(32, 32, 1, 1.0, 0.02, &mut rng).unwrap());
    assert_eq!((param_count(&sym, true), param_count(&lora, false)), (34, 64));
    for n in 101..=1024 {
        for r in 1..=8.min(n) {
            assert!(((n + 1) * r + 1) as f64 / (2 * n * r) as f64 <= 0.51, "n={n} r={r}");
        }
    }
}

#[test]
fn rank_bound_at_n_256() {
    let mut rng = SeededRng::new(256);
    for r in [1, 4, 8] {
        let mut adapter = Adapter::SymLora(init_symlora(256, r, r as f64, 0.02, &mut rng).unwrap());
        randomize(&mut adapter, &mut rng, 1.0);
        assert!(tail_ratio(&adapter.delta_weight(), r) <= 1e-10);
        assert!(adapter.delta_weight().asymmetry().unwrap() <= 1e-12);
    }
}

#[test]
fn invariants_hold_through_adam_steps() {
    let task = make_planted_task::<f64>(24, 3, false, 0.05, 11).unwrap();
    let mut layer = task.base_layer();
    let mut rng = SeededRng::new(12);
    layer
        .attach(Adapter::SymLora(init_symlora(24, 3, 3.0, 0.02, &mut rng).unwrap()))
        .unwrap();
    let mut state = AdamState::new();
    let cfg = AdamConfig {
        learning_rate: 5e-2,
        ..AdamConfig::default()
    };
    for _ in 0..200 {
        let (x, y) = task.sample(16, &mut rng);
        let mut tape = Tape::new();
        let xn = tape.constant(x);
        let yn = tape.constant(y);
        let h = layer.forward_tape(&mut tape, xn, false, None).unwrap();
        let loss = tape.mse(h, yn).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut params = Learner::<f64, PlantedLinearTask<f64>>::trainable_params(&layer);
        symlora::training::adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
        Learner::<f64, PlantedLinearTask<f64>>::set_trainable_params(&mut layer, &params).unwrap();

        let delta = layer.adapter().unwrap().delta_weight();
        assert!(delta.asymmetry().unwrap() <= 1e-12);
        assert!(tail_ratio(&delta, 3) <= 1e-10);
    }
}

#[test]
fn logged_invariants_hold_for_a_whole_run() {
    let task = make_planted_task::<f64>(16, 4, false, 0.01, 5).unwrap();
    let mut layer = task.base_layer();
    let mut rng = SeededRng::new(6);
    layer
        .attach(Adapter::SymLora(init_symlora(16, 2, 2.0, 0.02, &mut rng).unwrap()))
        .unwrap();
    let cfg = TrainConfig {
        steps: 300,
        eval_every: 10,
        check_invariants: true,
        ..TrainConfig::default()
    };
    let result = train(&mut layer, &task, &cfg).unwrap();
    assert_eq!(result.records.len(), 30);
    for rec in &result.records {
        let inv = rec.invariants.as_ref().unwrap();
        assert!(inv.max_asymmetry.unwrap() <= 1e-12);
        assert!(inv.max_rank_ratio <= 1e-10);
    }
}

fn small_model_config() -> TinyTransformerConfig {
    TinyTransformerConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        d_ff: 32,
        max_seq_len: 8,
        ..TinyTransformerConfig::default()
    }
}

#[test]
fn logits_follow_batch_permutations() {
    let mut model = build_model::<f64>(&small_model_config()).unwrap();
    model
        .inject_adapters(&InjectionPolicy::default(), &SeededRng::new(1))
        .unwrap();
    let mut rng = SeededRng::new(2);
    let batch: Vec<Vec<usize>> = (0..9).map(|_| (0..6).map(|_| rng.below(16)).collect()).collect();
    let logits = model_forward(&model, &batch).unwrap();
    let perm = [4, 0, 8, 2, 7, 1, 3, 6, 5];
    let permuted: Vec<Vec<usize>> = perm.iter().map(|&i| batch[i].clone()).collect();
    let plogits = model_forward(&model, &permuted).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(plogits.row(k), logits.row(i));
    }
}

#[test]
fn norm_report_is_a_pure_function_of_parameters() {
    let task = ToySequenceTask::new(SequenceTaskKind::Majority, 16, 6, 2, 3).unwrap();
    for kind in [AdapterKind::Symlora, AdapterKind::Lora] {
        let mut model = build_model::<f64>(&small_model_config()).unwrap();
        model
            .inject_adapters(&InjectionPolicy::new(kind), &SeededRng::new(4))
            .unwrap();
        let base_norms: Vec<f64> = model
            .layers()
            .filter(|l| l.adapter().is_some())
            .map(|l| l.base().weight().frobenius_norm())
            .collect();
        let cfg = TrainConfig {
            steps: 20,
            batch_size: 8,
            ..TrainConfig::default()
        };
        train(&mut model, &task, &cfg).unwrap();
        let copy = model.clone();
        let a = norm_report(&model, NormKind::Frobenius).unwrap();
        assert_eq!(a, norm_report(&copy, NormKind::Frobenius).unwrap());
        for row in &a.rows {
            assert_eq!(row.difference, row.base_term_norm - row.adapter_norm);
            assert_eq!(row.lambda_value.is_some(), kind == AdapterKind::Symlora);
        }
        if kind == AdapterKind::Lora {
            let trained: Vec<f64> = a.rows.iter().map(|r| r.base_term_norm).collect();
            assert_eq!(trained, base_norms);
        }
    }
}
