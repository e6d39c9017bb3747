//! Optimizers, the fine-tuning loop, grid search and score statistics.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::Adapter;
use crate::error::{Error, Result};
use crate::numerics::{GradientMap, Matrix, NodeId, ParamId, ParamSet, SeededRng, Tape};
use crate::scalar::Scalar;

/// A source of training batches.
pub trait Task<T: Scalar>: Sync {
    type Batch;

    fn id(&self) -> String;
    fn metric(&self) -> MetricKind;
    fn sample_batch(&self, batch_size: usize, rng: &mut SeededRng) -> Self::Batch;
}

/// Something whose trainable tensors can be fitted to a [`Task`].
pub trait Learner<T: Scalar, K: Task<T>> {
    /// Records the training loss for `batch` on `tape`; returns the 1x1 node.
    fn loss(&self, tape: &mut Tape<T>, batch: &K::Batch) -> Result<NodeId>;

    fn trainable_params(&self) -> ParamSet<T>;

    /// Writes back tensors produced by an optimizer step.
    fn set_trainable_params(&mut self, params: &ParamSet<T>) -> Result<()>;

    /// Task metric on held-out data.
    fn evaluate(&self, task: &K) -> Result<f64>;

    /// Hash over every frozen tensor.
    fn frozen_fingerprint(&self) -> u64;

    /// Symmetry and rank checks over attached adapters.
    fn invariants(&self) -> Result<Option<InvariantCheck>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Mse,
    Accuracy,
}

impl MetricKind {
    pub fn higher_is_better(self) -> bool {
        matches!(self, Self::Accuracy)
    }

    /// `true` when `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        if self.higher_is_better() {
            a > b
        } else {
            a < b
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        Self::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::adam()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Log (and evaluate) every this many steps; the last step is always logged.
    pub eval_every: usize,
    /// L2 penalty added to the gradient of every trainable tensor.
    pub weight_decay: f64,
    /// Run adapter symmetry/rank checks at every logged step.
    pub check_invariants: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            batch_size: 32,
            steps: 500,
            optimizer: OptimizerKind::default(),
            seed: 0,
            eval_every: 50,
            weight_decay: 0.0,
            check_invariants: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidConfig("eval_every must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Adapter health at one logged step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantCheck {
    /// Worst `max|ΔW - ΔWᵀ|` over symmetric adapters (`None` if there are none).
    pub max_asymmetry: Option<f64>,
    /// Worst `σ_{r+1}/σ_1` over all adapters.
    pub max_rank_ratio: f64,
}

/// Aggregates [`InvariantCheck`] over a set of adapters.
pub fn adapter_invariants<'a, T: Scalar>(
    adapters: impl Iterator<Item = &'a Adapter<T>>,
) -> Result<Option<InvariantCheck>> {
    let mut seen = false;
    let mut max_asymmetry: Option<f64> = None;
    let mut max_rank_ratio: f64 = 0.0;
    for adapter in adapters {
        seen = true;
        if let Adapter::SymLora(_) = adapter {
            let a = adapter.symmetry_error().map_or(0.0, |v| v.as_f64());
            max_asymmetry = Some(max_asymmetry.map_or(a, |m: f64| m.max(a)));
        }
        max_rank_ratio = max_rank_ratio.max(adapter.rank_ratio()?.as_f64());
    }
    Ok(seen.then_some(InvariantCheck {
        max_asymmetry,
        max_rank_ratio,
    }))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub metric: f64,
    pub invariants: Option<InvariantCheck>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub task_id: String,
    pub metric_kind: MetricKind,
    pub initial_metric: f64,
    pub final_metric: f64,
    pub records: Vec<LogRecord>,
    pub wall_clock_seconds: f64,
    pub frozen_fingerprint: u64,
}

impl TrainResult {
    /// `(step, loss)` pairs at logged steps.
    pub fn loss_curve(&self) -> Vec<(usize, f64)> {
        self.records.iter().map(|r| (r.step, r.loss)).collect()
    }

    /// Writes the log as one JSON object per line.
    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for record in &self.records {
            serde_json::to_writer(&mut out, record)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Per-tensor first and second moments plus the shared step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    moments: std::collections::BTreeMap<ParamId, (Matrix<T>, Matrix<T>)>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            moments: Default::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn grad_for<'g, T: Scalar>(grads: &'g GradientMap<T>, id: &ParamId, value: &Matrix<T>) -> Result<Option<&'g Matrix<T>>> {
    match grads.get(id) {
        Some(g) if g.shape() != value.shape() => Err(Error::ShapeMismatch {
            op: "optimizer step",
            left_rows: value.rows(),
            left_cols: value.cols(),
            right_rows: g.rows(),
            right_cols: g.cols(),
        }),
        other => Ok(other),
    }
}

/// Bias-corrected Adam. Tensors without a gradient entry are treated as
/// having a zero gradient.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &GradientMap<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    for (id, value) in params.iter() {
        grad_for(grads, id, value)?;
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let correction1 = T::one() - T::lit(cfg.beta1.powi(t));
    let correction2 = T::one() - T::lit(cfg.beta2.powi(t));
    let lr = T::lit(cfg.learning_rate);
    let eps = T::lit(cfg.eps);
    for (id, value) in params.iter_mut() {
        let grad = grads.get(id);
        let (m, v) = state
            .moments
            .entry(id.clone())
            .or_insert_with(|| (Matrix::zeros(value.rows(), value.cols()), Matrix::zeros(value.rows(), value.cols())));
        let p = value.as_mut_slice();
        let ms = m.as_mut_slice();
        let vs = v.as_mut_slice();
        for k in 0..p.len() {
            let g = grad.map_or(T::zero(), |g| g.as_slice()[k]);
            ms[k] = b1 * ms[k] + (T::one() - b1) * g;
            vs[k] = b2 * vs[k] + (T::one() - b2) * g * g;
            let m_hat = ms[k] / correction1;
            let v_hat = vs[k] / correction2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Plain gradient descent.
pub fn sgd_step<T: Scalar>(params: &mut ParamSet<T>, grads: &GradientMap<T>, learning_rate: f64) -> Result<()> {
    let lr = T::lit(learning_rate);
    for (id, value) in params.iter_mut() {
        if let Some(g) = grad_for(grads, id, value)? {
            value.axpy(-lr, g)?;
        }
    }
    Ok(())
}

/// Optimizer selected by a [`TrainConfig`].
#[derive(Clone, Debug)]
pub enum Optimizer<T> {
    Sgd { learning_rate: f64 },
    Adam { cfg: AdamConfig, state: AdamState<T> },
}

impl<T: Scalar> Optimizer<T> {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        match cfg.optimizer {
            OptimizerKind::Sgd => Self::Sgd {
                learning_rate: cfg.learning_rate,
            },
            OptimizerKind::Adam { beta1, beta2, eps } => Self::Adam {
                cfg: AdamConfig {
                    learning_rate: cfg.learning_rate,
                    beta1,
                    beta2,
                    eps,
                },
                state: AdamState::new(),
            },
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &GradientMap<T>) -> Result<()> {
        match self {
            Self::Sgd { learning_rate } => sgd_step(params, grads, *learning_rate),
            Self::Adam { cfg, state } => adam_step(params, grads, state, cfg),
        }
    }
}

/// Fits the learner's trainable tensors to `task`.
///
/// Fails fast with [`Error::Divergence`] on a non-finite loss. Frozen tensors
/// are fingerprinted before and after; any change is reported as an error.
pub fn train<T, K, L>(learner: &mut L, task: &K, cfg: &TrainConfig) -> Result<TrainResult>
where
    T: Scalar,
    K: Task<T>,
    L: Learner<T, K>,
{
    cfg.validate()?;
    let started = Instant::now();
    let fingerprint = learner.frozen_fingerprint();
    let initial_metric = learner.evaluate(task)?;
    let mut rng = SeededRng::new(cfg.seed);
    let mut optimizer = Optimizer::<T>::from_config(cfg);
    let mut records = Vec::new();
    let mut final_metric = initial_metric;

    for step in 1..=cfg.steps {
        let batch = task.sample_batch(cfg.batch_size, &mut rng);
        let mut tape = Tape::new();
        let loss_node = learner.loss(&mut tape, &batch)?;
        let loss = tape.scalar_value(loss_node).map_or(f64::NAN, |v| v.as_f64());
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let mut grads = tape.backward(loss_node)?;
        let mut params = learner.trainable_params();
        if cfg.weight_decay > 0.0 {
            let decay = T::lit(cfg.weight_decay);
            for (id, g) in grads.iter_mut() {
                if let Some(p) = params.get(id) {
                    g.axpy(decay, p)?;
                }
            }
        }
        optimizer.step(&mut params, &grads)?;
        learner.set_trainable_params(&params)?;

        if step % cfg.eval_every == 0 || step == cfg.steps {
            let metric = learner.evaluate(task)?;
            if !metric.is_finite() {
                return Err(Error::Divergence { step, loss: metric });
            }
            final_metric = metric;
            let invariants = if cfg.check_invariants {
                learner.invariants()?
            } else {
                None
            };
            records.push(LogRecord {
                step,
                loss,
                metric,
                invariants,
            });
        }
    }

    let after = learner.frozen_fingerprint();
    if after != fingerprint {
        return Err(Error::FrozenWeightsChanged {
            before: fingerprint,
            after,
        });
    }
    Ok(TrainResult {
        task_id: task.id(),
        metric_kind: task.metric(),
        initial_metric,
        final_metric,
        records,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        frozen_fingerprint: fingerprint,
    })
}

/// Which standard-deviation estimate a [`ScoreStats`] used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StdEstimate {
    /// Sample standard deviation over runs (`n - 1` denominator).
    Sample,
    /// `s = p(1 - p)` for a fraction score `p`, as used for the published
    /// intervals (this is the Bernoulli variance, not its square root).
    BernoulliVariance,
    /// `s = sqrt(p(1 - p))`, the Bernoulli standard deviation.
    BernoulliStd,
}

/// Mean score with a 95% normal-approximation interval `± 1.96 s / sqrt(n)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub mean: f64,
    pub std: Option<f64>,
    pub n: usize,
    pub half_width: Option<f64>,
    pub estimate: StdEstimate,
}

pub const Z_95: f64 = 1.96;

impl ScoreStats {
    pub fn lower(&self) -> f64 {
        self.mean - self.half_width.unwrap_or(0.0)
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.half_width.unwrap_or(0.0)
    }

    /// Closed intervals intersect; a missing half-width is a point.
    pub fn overlaps(&self, other: &Self) -> bool {
        self.lower() <= other.upper() && other.lower() <= self.upper()
    }
}

/// Mean, sample std and half-width over repeated runs. A single score has
/// no std or half-width.
pub fn confidence_interval(scores: &[f64]) -> Result<ScoreStats> {
    if scores.is_empty() {
        return Err(Error::InvalidConfig("confidence interval needs at least one score".into()));
    }
    let n = scores.len();
    let mean = scores.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Ok(ScoreStats {
            mean,
            std: None,
            n,
            half_width: None,
            estimate: StdEstimate::Sample,
        });
    }
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    Ok(ScoreStats {
        mean,
        std: Some(std),
        n,
        half_width: Some(Z_95 * std / (n as f64).sqrt()),
        estimate: StdEstimate::Sample,
    })
}

/// Interval for a fraction score `p` measured on `n` evaluations, with
/// `s = p(1 - p)` (or `sqrt(p(1 - p))` when `sqrt_variant` is set).
pub fn bernoulli_interval(p: f64, n: usize, sqrt_variant: bool) -> Result<ScoreStats> {
    if !(0.0..=1.0).contains(&p) || n == 0 {
        return Err(Error::InvalidConfig(format!(
            "bernoulli interval needs 0 <= p <= 1 and n >= 1, got p={p}, n={n}"
        )));
    }
    let variance = p * (1.0 - p);
    let (std, estimate) = if sqrt_variant {
        (variance.sqrt(), StdEstimate::BernoulliStd)
    } else {
        (variance, StdEstimate::BernoulliVariance)
    };
    Ok(ScoreStats {
        mean: p,
        std: Some(std),
        n,
        half_width: Some(Z_95 * std / (n as f64).sqrt()),
        estimate,
    })
}

/// Outcome of one grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub config: TrainConfig,
    /// `(seed, final metric)` for runs that finished.
    pub metrics: Vec<(u64, f64)>,
    /// `(seed, error message)` for runs that failed.
    pub failures: Vec<(u64, String)>,
    pub stats: Option<ScoreStats>,
}

impl GridCell {
    pub fn failed(&self) -> bool {
        !self.failures.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub metric_kind: MetricKind,
    pub cells: Vec<GridCell>,
    pub best: Option<TrainConfig>,
}

fn config_order(a: &TrainConfig, b: &TrainConfig) -> std::cmp::Ordering {
    a.learning_rate
        .total_cmp(&b.learning_rate)
        .then(a.batch_size.cmp(&b.batch_size))
        .then(a.steps.cmp(&b.steps))
        .then(a.weight_decay.total_cmp(&b.weight_decay))
        .then_with(|| format!("{:?}", a.optimizer).cmp(&format!("{:?}", b.optimizer)))
}

/// Trains every `(config, seed)` pair and picks the config with the best mean
/// metric among cells with no failed run.
///
/// Each run uses `seed` both for the learner factory and for batch sampling,
/// independent of the cell's position in `grid`, so permuting the grid does
/// not change any cell's result. Ties go to the smallest config in
/// `(learning_rate, batch_size, steps, ...)` order. Runs execute on the rayon
/// pool.
pub fn grid_search<T, K, L, F>(factory: F, task: &K, grid: &[TrainConfig], seeds: &[u64]) -> Result<GridReport>
where
    T: Scalar,
    K: Task<T>,
    L: Learner<T, K>,
    F: Fn(u64) -> Result<L> + Sync,
{
    if grid.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidConfig("grid search needs a nonempty grid and seed list".into()));
    }
    let jobs: Vec<(usize, u64)> = (0..grid.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let outcomes: Vec<(usize, u64, Result<f64>)> = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let cfg = TrainConfig {
                seed,
                ..grid[c].clone()
            };
            let run = factory(seed).and_then(|mut learner| train(&mut learner, task, &cfg));
            (c, seed, run.map(|r| r.final_metric))
        })
        .collect();

    let mut cells: Vec<GridCell> = grid
        .iter()
        .map(|cfg| GridCell {
            config: cfg.clone(),
            metrics: Vec::new(),
            failures: Vec::new(),
            stats: None,
        })
        .collect();
    for (c, seed, outcome) in outcomes {
        match outcome {
            Ok(metric) => cells[c].metrics.push((seed, metric)),
            Err(e) => cells[c].failures.push((seed, e.to_string())),
        }
    }
    for cell in &mut cells {
        if !cell.failed() {
            let scores: Vec<f64> = cell.metrics.iter().map(|(_, m)| *m).collect();
            cell.stats = Some(confidence_interval(&scores)?);
        }
    }

    let kind = task.metric();
    let mut best: Option<&GridCell> = None;
    for cell in cells.iter().filter(|c| !c.failed()) {
        let mean = cell.stats.expect("set for finished cells").mean;
        best = match best {
            None => Some(cell),
            Some(current) => {
                let current_mean = current.stats.expect("set").mean;
                let wins = kind.better(mean, current_mean)
                    || (mean == current_mean && config_order(&cell.config, &current.config).is_lt());
                Some(if wins { cell } else { current })
            }
        };
    }
    let best = best.map(|c| c.config.clone());
    Ok(GridReport {
        metric_kind: kind,
        cells,
        best,
    })
}
