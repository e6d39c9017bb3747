use symlora::adapters::{init_symlora, AdaptedLinear, Adapter};
use symlora::error::Error;
use symlora::model::{build_model, pretrain_base, InjectionPolicy, TinyTransformerConfig};
use symlora::numerics::SeededRng;
use symlora::tasks::{make_planted_task, PlantedLinearTask, SequenceTaskKind, ToySequenceTask};
use symlora::training::{grid_search, train, Learner, OptimizerKind, TrainConfig};

fn planted(n: usize, r: usize) -> PlantedLinearTask<f64> {
    make_planted_task(n, r, true, 0.0, 40).unwrap()
}

fn symlora_layer(task: &PlantedLinearTask<f64>, r: usize, seed: u64) -> AdaptedLinear<f64> {
    let mut layer = task.base_layer();
    let adapter = init_symlora(task.dim(), r, r as f64, 0.02, &mut SeededRng::new(seed)).unwrap();
    layer.attach(Adapter::SymLora(adapter)).unwrap();
    layer
}

fn cfg(lr: f64, steps: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        steps,
        eval_every: 25,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_steps_leaves_the_metric() {
    let task = planted(12, 2);
    let mut layer = symlora_layer(&task, 2, 1);
    let before = layer.evaluate(&task).unwrap();
    let result = train(&mut layer, &task, &cfg(1e-2, 0)).unwrap();
    assert_eq!(result.final_metric, before);
    assert_eq!(result.initial_metric, before);
    assert!(result.records.is_empty());
}

#[test]
fn rank_two_planted_task_is_learned() {
    let task = planted(16, 2);
    let mut layer = symlora_layer(&task, 2, 2);
    let result = train(&mut layer, &task, &cfg(1e-2, 1500)).unwrap();
    assert!(result.final_metric <= 1e-3, "mse {}", result.final_metric);
    assert_eq!(result.loss_curve().len(), result.records.len());
    assert_eq!(result.records.len(), 60);
}

#[test]
fn huge_learning_rate_diverges() {
    let task = planted(12, 2);
    let mut layer = symlora_layer(&task, 2, 3);
    let sgd = TrainConfig {
        optimizer: OptimizerKind::Sgd,
        ..cfg(1e6, 50)
    };
    assert!(matches!(train(&mut layer, &task, &sgd), Err(Error::Divergence { .. })));

    // Adam's step is bounded by the learning rate, so parameters only grow
    // linearly: the loss explodes but stays finite.
    let mut layer = symlora_layer(&task, 2, 3);
    let adam = train(&mut layer, &task, &cfg(1e6, 50)).unwrap();
    assert!(adam.final_metric.is_finite() && adam.final_metric > 1e20 * adam.initial_metric);
}

#[test]
fn runs_are_deterministic_and_keep_the_base() {
    let task = planted(12, 2);
    let mut a = symlora_layer(&task, 2, 4);
    let mut b = symlora_layer(&task, 2, 4);
    let before = a.frozen_fingerprint();
    let ra = train(&mut a, &task, &cfg(1e-2, 200)).unwrap();
    let rb = train(&mut b, &task, &cfg(1e-2, 200)).unwrap();
    assert_eq!(ra.records, rb.records);
    assert_eq!(a.merge().unwrap(), b.merge().unwrap());
    assert_eq!(ra.frozen_fingerprint, before);
    assert_eq!(a.frozen_fingerprint(), before);
}

#[test]
fn grid_of_one_returns_its_config() {
    let task = planted(8, 1);
    let only = cfg(1e-2, 50);
    let report = grid_search(|s| Ok(symlora_layer(&task, 1, s)), &task, std::slice::from_ref(&only), &[0, 1]).unwrap();
    assert_eq!(report.best, Some(only));
    assert_eq!(report.cells[0].metrics.len(), 2);
}

#[test]
fn diverging_cell_is_flagged_not_fatal() {
    let task = planted(8, 1);
    let sgd = |lr| TrainConfig {
        optimizer: OptimizerKind::Sgd,
        ..cfg(lr, 200)
    };
    let grid = [sgd(1e6), sgd(5e-2)];
    let report = grid_search(|s| Ok(symlora_layer(&task, 1, s)), &task, &grid, &[0, 1, 2]).unwrap();
    assert!(report.cells[0].failed());
    assert_eq!(report.cells[0].stats, None);
    assert!(!report.cells[1].failed());
    assert_eq!(report.best, Some(grid[1].clone()));
}

#[test]
fn grid_order_does_not_matter() {
    let task = planted(8, 2);
    let grid: Vec<TrainConfig> = [3e-3, 1e-2, 3e-2]
        .iter()
        .flat_map(|&lr| {
            [8, 16].map(|b| TrainConfig {
                batch_size: b,
                ..cfg(lr, 100)
            })
        })
        .collect();
    let seeds = [5, 6, 7];
    let factory = |s| Ok(symlora_layer(&task, 2, s));
    let forward = grid_search(factory, &task, &grid, &seeds).unwrap();
    let reversed: Vec<TrainConfig> = grid.iter().rev().cloned().collect();
    let backward = grid_search(factory, &task, &reversed, &seeds).unwrap();
    assert_eq!(forward.best, backward.best);
    for cell in &forward.cells {
        let twin = backward.cells.iter().find(|c| c.config == cell.config).unwrap();
        assert_eq!(cell, twin);
    }
}

#[test]
fn empty_grid_or_seeds_rejected() {
    let task = planted(8, 1);
    let factory = |s| Ok(symlora_layer(&task, 1, s));
    assert!(grid_search(factory, &task, &[], &[0]).is_err());
    assert!(grid_search(factory, &task, &[cfg(1e-2, 5)], &[]).is_err());
}

fn tiny() -> TinyTransformerConfig {
    TinyTransformerConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        d_ff: 32,
        max_seq_len: 6,
        ..TinyTransformerConfig::default()
    }
}

#[test]
fn pretraining_lowers_loss_and_fine_tuning_keeps_the_base() {
    let task = ToySequenceTask::new(SequenceTaskKind::Majority, 16, 6, 2, 50).unwrap();
    let mut model = build_model::<f64>(&tiny()).unwrap();
    let eval = task.eval_batch();
    let before = model.loss_on(&eval).unwrap();
    let pcfg = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 16,
        steps: 150,
        eval_every: 150,
        ..TrainConfig::default()
    };
    pretrain_base(&mut model, &task, &pcfg).unwrap();
    let after = model.loss_on(&eval).unwrap();
    assert!(after < before, "{after} >= {before}");

    model
        .inject_adapters(&InjectionPolicy::default(), &SeededRng::new(51))
        .unwrap();
    let frozen = model.frozen_fingerprint();
    let base = model.base_fingerprint();
    let target = ToySequenceTask::new(SequenceTaskKind::FirstTokenCopy, 16, 6, 2, 52).unwrap();
    let result = train(
        &mut model,
        &target,
        &TrainConfig {
            steps: 40,
            batch_size: 16,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    assert_eq!(result.frozen_fingerprint, frozen);
    assert_eq!(model.frozen_fingerprint(), frozen);
    assert_eq!(model.base_fingerprint(), base);
}

#[test]
fn training_log_has_one_line_per_record() {
    let dir = tempfile::tempdir().unwrap();
    let task = planted(8, 1);
    let mut layer = symlora_layer(&task, 1, 9);
    let run = TrainConfig {
        check_invariants: true,
        ..cfg(1e-2, 100)
    };
    let result = train(&mut layer, &task, &run).unwrap();
    let path = dir.path().join("log.jsonl");
    result.write_log(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), result.records.len());
    for (line, rec) in text.lines().zip(&result.records) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["step"].as_u64().unwrap() as usize, rec.step);
        assert!(v["invariants"]["max_asymmetry"].is_number());
    }
}
