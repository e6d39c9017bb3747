//! The symmetric low-rank oracle and the training floors it predicts.

use symlora::adapters::{
    best_symmetric_rank_r_approximation, init_lora, init_symlora, symmetric_rank_r_residual, Adapter,
};
use symlora::numerics::{gaussian_matrix, Matrix, SeededRng};
use symlora::tasks::make_planted_task;
use symlora::training::{train, TrainConfig};

fn residual(t: &Matrix<f64>, c: &Matrix<f64>) -> f64 {
    t.sub(c).unwrap().frobenius_norm()
}

/// A random symmetric matrix of rank <= r: `Q diag(l) Qᵀ`.
fn candidate(n: usize, r: usize, std: f64, rng: &mut SeededRng) -> Matrix<f64> {
    let q = gaussian_matrix(n, r, std, rng);
    let l: Vec<f64> = (0..r).map(|_| 4.0 * rng.standard_normal()).collect();
    q.matmul(&Matrix::diag(&l)).unwrap().matmul_nt(&q).unwrap()
}

#[test]
fn no_random_candidate_beats_the_oracle() {
    let mut rng = SeededRng::new(8);
    let t = gaussian_matrix::<f64>(8, 8, 1.0, &mut rng);
    let best = best_symmetric_rank_r_approximation(&t, 2).unwrap();
    let floor = symmetric_rank_r_residual(&t, 2).unwrap();
    assert!((residual(&t, &best) - floor).abs() <= 1e-12);
    assert!(best.asymmetry().unwrap() <= 1e-12);

    let s = singular_values_of(&best);
    assert!(s[2] <= 1e-10 * s[0]);

    // Half the candidates are unstructured, half perturb the optimum.
    let mut closest = f64::INFINITY;
    for k in 0..10_000 {
        let c = if k % 2 == 0 {
            candidate(8, 2, 0.5, &mut rng)
        } else {
            let eps = 10f64.powf(-1.0 - 4.0 * rng.uniform());
            let nudge = candidate(8, 2, 1.0, &mut rng).scale(eps);
            let raw = best.add(&nudge).unwrap();
            best_symmetric_rank_r_approximation(&raw, 2).unwrap()
        };
        let res = residual(&t, &c);
        assert!(res >= floor - 1e-12, "candidate {k} beats the oracle: {res} < {floor}");
        closest = closest.min(res);
    }
    assert!(closest - floor < 1e-2, "search never got near the floor");
}

fn singular_values_of(m: &Matrix<f64>) -> Vec<f64> {
    symlora::numerics::singular_values(m).unwrap()
}

#[test]
fn antisymmetric_targets_project_to_zero() {
    let mut rng = SeededRng::new(9);
    let g = gaussian_matrix::<f64>(7, 7, 1.0, &mut rng);
    let t = g.sub(&g.transpose()).unwrap();
    for r in 1..=7 {
        let best = best_symmetric_rank_r_approximation(&t, r).unwrap();
        assert!(best.max_abs() <= 1e-12);
        let res = symmetric_rank_r_residual(&t, r).unwrap();
        assert!((res - t.frobenius_norm()).abs() <= 1e-12 * t.frobenius_norm());
    }
}

#[test]
fn symmetric_rank_one_target_is_its_own_approximation() {
    let mut rng = SeededRng::new(10);
    let u = gaussian_matrix::<f64>(6, 1, 1.0, &mut rng);
    let t = u.matmul_nt(&u).unwrap().scale(-3.0);
    let best = best_symmetric_rank_r_approximation(&t, 1).unwrap();
    assert!(best.max_abs_diff(&t).unwrap() <= 1e-12 * t.max_abs());
    assert!(symmetric_rank_r_residual(&t, 1).unwrap() <= 1e-12 * t.frobenius_norm());
}

/// `min over λ` of the rank-`r` symmetric residual of `(1 - λ) W0 + ΔW*`,
/// as a population MSE: a scan over λ in [-1, 3], then ternary refinement.
fn free_lambda_floor(w0: &Matrix<f64>, delta: &Matrix<f64>, r: usize) -> f64 {
    let n = w0.rows() as f64;
    let at = |lambda: f64| {
        let t = w0.scale(1.0 - lambda).add(delta).unwrap();
        symmetric_rank_r_residual(&t, r).unwrap().powi(2) / n
    };
    let grid: Vec<f64> = (0..=400).map(|k| -1.0 + 0.01 * k as f64).collect();
    let k = (0..grid.len()).min_by(|&a, &b| at(grid[a]).total_cmp(&at(grid[b]))).unwrap();
    let (mut lo, mut hi) = (grid[k.saturating_sub(1)], grid[(k + 1).min(grid.len() - 1)]);
    for _ in 0..100 {
        let (a, b) = (lo + (hi - lo) / 3.0, hi - (hi - lo) / 3.0);
        if at(a) < at(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    at(0.5 * (lo + hi)).min(at(grid[k]))
}

fn run_cfg(steps: usize, lr: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        batch_size: 64,
        steps,
        seed,
        eval_every: steps,
        ..TrainConfig::default()
    }
}

#[test]
fn underranked_symlora_settles_on_the_oracle_floor() {
    // ΔW* is PSD of rank 4; a rank-2 SymLoRA can only reach its top-2 part.
    let task = make_planted_task::<f64>(16, 4, true, 0.0, 21).unwrap();
    let floor = task.symmetric_floor_mse(2).unwrap();
    assert!(floor > 0.0);
    let mut layer = task.base_layer();
    let mut rng = SeededRng::new(22);
    layer
        .attach(Adapter::SymLora(init_symlora(16, 2, 2.0, 0.02, &mut rng).unwrap()))
        .unwrap();
    let result = train(&mut layer, &task, &run_cfg(3000, 1e-2, 23)).unwrap();
    let rel = (result.final_metric - floor).abs() / floor;
    assert!(rel <= 0.1, "final {} vs floor {floor}", result.final_metric);
}

#[test]
fn asymmetric_floor_separates_the_two_adapters() {
    let task = make_planted_task::<f64>(16, 2, false, 0.0, 31).unwrap();
    let floor = task.symmetric_floor_mse(2).unwrap();
    assert!(floor >= task.antisymmetric_floor_mse() - 1e-15);

    let mut rng = SeededRng::new(32);
    let mut sym = task.base_layer();
    sym.attach(Adapter::SymLora(init_symlora(16, 2, 2.0, 0.02, &mut rng).unwrap()))
        .unwrap();
    let sym_mse = train(&mut sym, &task, &run_cfg(2000, 1e-2, 33)).unwrap().final_metric;

    let mut lora = task.base_layer();
    lora.attach(Adapter::Lora(init_lora(16, 16, 2, 2.0, 0.02, &mut rng).unwrap()))
        .unwrap();
    let lora_mse = train(&mut lora, &task, &run_cfg(2000, 1e-2, 33)).unwrap().final_metric;

    // λ is trainable, so the true floor minimizes over the base scale too.
    let free = free_lambda_floor(task.base(), task.planted_update(), 2);
    assert!(free <= floor);
    assert!(sym_mse >= free * (1.0 - 1e-6), "{sym_mse} < floor {free}");
    assert!(lora_mse < 0.5 * floor, "lora {lora_mse} vs floor {floor}");
}
