//! Synthetic tasks with known optima.
//!
//! [`PlantedLinearTask`] regresses `y = (W0 + ΔW*) x + noise` with a planted
//! low-rank `ΔW*`, symmetric or not, so the best reachable loss of each
//! adapter kind is known in closed form. [`ToySequenceTask`] is a small
//! token-classification problem for the transformer.

use serde::{Deserialize, Serialize};

use crate::adapters::{symmetric_rank_r_residual, AdaptedLinear, BaseLinear};
use crate::error::{Error, Result};
use crate::numerics::{gaussian_matrix, derive_seed, Matrix, NodeId, ParamSet, SeededRng, Tape};
use crate::scalar::Scalar;
use crate::training::{adapter_invariants, InvariantCheck, Learner, MetricKind, Task};

/// Default planted-task width.
pub const DEFAULT_PLANTED_DIM: usize = 64;
/// Default planted update rank.
pub const DEFAULT_PLANTED_RANK: usize = 4;
/// Default observation noise.
pub const DEFAULT_NOISE_STD: f64 = 0.01;

const EVAL_STREAM: u64 = 0xE7A1;

#[derive(Clone, Debug, PartialEq)]
pub struct PlantedLinearTask<T> {
    base: Matrix<T>,
    delta: Matrix<T>,
    target: Matrix<T>,
    symmetric: bool,
    rank: usize,
    noise_std: f64,
    seed: u64,
}

/// Builds a planted regression task of width `n`.
///
/// `W0` has i.i.d. `N(0, 1/n)` entries. With `symmetric` set the planted
/// update is `G diag(g) Gᵀ` (`G` is `n x r*`, `g_k ∈ [1, 2)`), otherwise
/// `1.5 · B A` with Gaussian `n x r*` and `r* x n` factors.
pub fn make_planted_task<T: Scalar>(
    n: usize,
    r_star: usize,
    symmetric: bool,
    noise_std: f64,
    seed: u64,
) -> Result<PlantedLinearTask<T>> {
    planted(n, r_star, symmetric, false, noise_std, seed)
}

/// Symmetric planted task whose `g_k` carry random signs, so `ΔW*` is
/// indefinite.
///
/// Gradient descent from the `Λ = 0` start fixes each `Λ_k`'s sign early;
/// when the signs drawn do not match the target's, a column cannot cross over
/// without raising the loss and training stalls above zero even though the
/// target is representable.
pub fn make_signed_planted_task<T: Scalar>(
    n: usize,
    r_star: usize,
    noise_std: f64,
    seed: u64,
) -> Result<PlantedLinearTask<T>> {
    planted(n, r_star, true, true, noise_std, seed)
}

fn planted<T: Scalar>(
    n: usize,
    r_star: usize,
    symmetric: bool,
    signed: bool,
    noise_std: f64,
    seed: u64,
) -> Result<PlantedLinearTask<T>> {
    if r_star == 0 || r_star > n {
        return Err(Error::RankOutOfRange { rank: r_star, max: n });
    }
    if !(noise_std >= 0.0) {
        return Err(Error::InvalidConfig(format!("noise_std must be >= 0, got {noise_std}")));
    }
    let mut rng = SeededRng::new(seed);
    let unit = T::lit(1.0 / (n as f64).sqrt());
    let base = gaussian_matrix(n, n, unit, &mut rng);
    let delta = if symmetric {
        let g = gaussian_matrix::<T>(n, r_star, unit, &mut rng);
        let weights: Vec<T> = (0..r_star)
            .map(|_| {
                let magnitude = 1.0 + rng.uniform();
                let flip = rng.uniform() < 0.5;
                let sign = if signed && flip { -1.0 } else { 1.0 };
                T::lit(sign * magnitude)
            })
            .collect();
        let mut d = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut acc = T::zero();
                for k in 0..r_star {
                    acc += g[(i, k)] * weights[k] * g[(j, k)];
                }
                d[(i, j)] = acc;
                d[(j, i)] = acc;
            }
        }
        d
    } else {
        let b = gaussian_matrix::<T>(n, r_star, unit, &mut rng);
        let a = gaussian_matrix::<T>(r_star, n, unit, &mut rng);
        b.matmul(&a)?.scale(T::lit(1.5))
    };
    let target = base.add(&delta)?;
    Ok(PlantedLinearTask {
        base,
        delta,
        target,
        symmetric,
        rank: r_star,
        noise_std,
        seed,
    })
}

impl<T: Scalar> PlantedLinearTask<T> {
    pub fn dim(&self) -> usize {
        self.base.rows()
    }

    pub fn base(&self) -> &Matrix<T> {
        &self.base
    }

    pub fn planted_update(&self) -> &Matrix<T> {
        &self.delta
    }

    /// `W0 + ΔW*`
    pub fn target_weight(&self) -> &Matrix<T> {
        &self.target
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn planted_rank(&self) -> usize {
        self.rank
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Fresh single-layer model on this task's `W0`.
    pub fn base_layer(&self) -> AdaptedLinear<T> {
        AdaptedLinear::new(BaseLinear::new(self.base.clone(), 0, "planted"))
    }

    /// Standard-Gaussian inputs (`n x batch`) and their noisy targets.
    pub fn sample(&self, batch_size: usize, rng: &mut SeededRng) -> (Matrix<T>, Matrix<T>) {
        let n = self.dim();
        let x = gaussian_matrix(n, batch_size, T::one(), rng);
        let mut y = self.target.matmul(&x).expect("square target");
        if self.noise_std > 0.0 {
            let noise = gaussian_matrix(n, batch_size, T::lit(self.noise_std), rng);
            y = y.add(&noise).expect("same shape");
        }
        (x, y)
    }

    /// Population mean squared error per output coordinate of a layer with
    /// effective weight `w`: `||w - W*||²_F / n + noise²`, exact for
    /// standard-Gaussian inputs.
    pub fn population_mse(&self, w: &Matrix<T>) -> Result<f64> {
        let diff = w.sub(&self.target)?;
        let fro = diff.frobenius_norm().as_f64();
        Ok(fro * fro / self.dim() as f64 + self.noise_std * self.noise_std)
    }

    /// Lowest population MSE a rank-`r` symmetric update reaches with the
    /// base scale held at 1: residual of the best symmetric rank-`r`
    /// approximation of `ΔW*`.
    pub fn symmetric_floor_mse(&self, r: usize) -> Result<f64> {
        let res = symmetric_rank_r_residual(&self.delta, r)?.as_f64();
        Ok(res * res / self.dim() as f64 + self.noise_std * self.noise_std)
    }

    /// `||(ΔW* - ΔW*ᵀ)/2||²_F / n`, the part of the update no symmetric
    /// matrix can express.
    pub fn antisymmetric_floor_mse(&self) -> f64 {
        let n = self.dim();
        let anti = Matrix::from_fn(n, n, |i, j| (self.delta[(i, j)] - self.delta[(j, i)]) * T::lit(0.5));
        let fro = anti.frobenius_norm().as_f64();
        fro * fro / n as f64
    }
}

/// A batch of planted-task samples as column matrices.
#[derive(Clone, Debug)]
pub struct LinearBatch<T> {
    pub inputs: Matrix<T>,
    pub targets: Matrix<T>,
}

impl<T: Scalar> Task<T> for PlantedLinearTask<T> {
    type Batch = LinearBatch<T>;

    fn id(&self) -> String {
        if self.symmetric {
            "planted-sym".into()
        } else {
            "planted-asym".into()
        }
    }

    fn metric(&self) -> MetricKind {
        MetricKind::Mse
    }

    fn sample_batch(&self, batch_size: usize, rng: &mut SeededRng) -> Self::Batch {
        let (inputs, targets) = self.sample(batch_size, rng);
        LinearBatch { inputs, targets }
    }
}

impl<T: Scalar> Learner<T, PlantedLinearTask<T>> for AdaptedLinear<T> {
    fn loss(&self, tape: &mut Tape<T>, batch: &LinearBatch<T>) -> Result<NodeId> {
        let x = tape.constant(batch.inputs.clone());
        let y = tape.constant(batch.targets.clone());
        let h = self.forward_tape(tape, x, false, None)?;
        tape.mse(h, y)
    }

    fn trainable_params(&self) -> ParamSet<T> {
        let mut out = ParamSet::new();
        if let Some(adapter) = self.adapter() {
            for (suffix, value) in adapter.tensors() {
                out.insert(self.param_id(suffix), value.clone());
            }
        }
        out
    }

    fn set_trainable_params(&mut self, params: &ParamSet<T>) -> Result<()> {
        let updates: Vec<(&'static str, Matrix<T>)> = match self.adapter() {
            None => return Ok(()),
            Some(adapter) => adapter
                .tensors()
                .into_iter()
                .filter_map(|(suffix, _)| params.get(&self.param_id(suffix)).map(|m| (suffix, m.clone())))
                .collect(),
        };
        let adapter = self.adapter_mut().expect("checked above");
        for (suffix, value) in updates {
            adapter.set_tensor(suffix, value)?;
        }
        Ok(())
    }

    fn evaluate(&self, task: &PlantedLinearTask<T>) -> Result<f64> {
        task.population_mse(&self.effective_weight())
    }

    fn frozen_fingerprint(&self) -> u64 {
        let mut h = crate::numerics::Fnv1a::new();
        crate::store::hash_tensor(&mut h, self.name(), self.base().weight());
        h.finish()
    }

    fn invariants(&self) -> Result<Option<InvariantCheck>> {
        adapter_invariants(self.adapter().into_iter())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SequenceTaskKind {
    /// Parity of the number of odd tokens.
    Parity,
    /// Whether tokens from the upper half of the vocabulary are the
    /// majority; ties go to the class of the first token.
    Majority,
    /// The first token's id modulo the number of classes.
    FirstTokenCopy,
}

impl SequenceTaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Parity => "parity",
            Self::Majority => "majority",
            Self::FirstTokenCopy => "first-token-copy",
        }
    }

    pub const ALL: [Self; 3] = [Self::Parity, Self::Majority, Self::FirstTokenCopy];
}

impl std::str::FromStr for SequenceTaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown sequence task {s:?}")))
    }
}

/// Token classification with a deterministic labeling rule.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToySequenceTask {
    pub kind: SequenceTaskKind,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub n_classes: usize,
    pub seed: u64,
    /// Size of the fixed evaluation set.
    pub eval_size: usize,
}

impl ToySequenceTask {
    pub fn new(kind: SequenceTaskKind, vocab_size: usize, seq_len: usize, n_classes: usize, seed: u64) -> Result<Self> {
        let task = Self {
            kind,
            vocab_size,
            seq_len,
            n_classes,
            seed,
            eval_size: 512,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn with_eval_size(mut self, eval_size: usize) -> Self {
        self.eval_size = eval_size;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.vocab_size < 2 || self.n_classes < 2 {
            return Err(Error::InvalidConfig(
                "sequence task needs seq_len >= 1, vocab_size >= 2, n_classes >= 2".into(),
            ));
        }
        match self.kind {
            SequenceTaskKind::Parity | SequenceTaskKind::Majority => {
                if self.n_classes != 2 || self.vocab_size % 2 != 0 {
                    return Err(Error::InvalidConfig(format!(
                        "{} needs 2 classes and an even vocabulary",
                        self.kind.as_str()
                    )));
                }
            }
            SequenceTaskKind::FirstTokenCopy => {
                if self.vocab_size % self.n_classes != 0 {
                    return Err(Error::InvalidConfig(
                        "first-token-copy needs vocab_size divisible by n_classes".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn label(&self, tokens: &[usize]) -> usize {
        match self.kind {
            SequenceTaskKind::Parity => tokens.iter().filter(|&&t| t % 2 == 1).count() % 2,
            SequenceTaskKind::Majority => {
                let half = self.vocab_size / 2;
                let high = tokens.iter().filter(|&&t| t >= half).count();
                let low = tokens.len() - high;
                match high.cmp(&low) {
                    std::cmp::Ordering::Greater => 1,
                    std::cmp::Ordering::Less => 0,
                    std::cmp::Ordering::Equal => usize::from(tokens[0] >= half),
                }
            }
            SequenceTaskKind::FirstTokenCopy => tokens[0] % self.n_classes,
        }
    }

    pub fn sample(&self, batch_size: usize, rng: &mut SeededRng) -> SequenceBatch {
        let tokens: Vec<Vec<usize>> = (0..batch_size)
            .map(|_| (0..self.seq_len).map(|_| rng.below(self.vocab_size)).collect())
            .collect();
        let labels = tokens.iter().map(|t| self.label(t)).collect();
        SequenceBatch { tokens, labels }
    }

    /// Fixed held-out batch drawn from a stream derived from the task seed.
    pub fn eval_batch(&self) -> SequenceBatch {
        let mut rng = SeededRng::new(derive_seed(self.seed, EVAL_STREAM));
        self.sample(self.eval_size, &mut rng)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceBatch {
    pub tokens: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Task<T> for ToySequenceTask {
    type Batch = SequenceBatch;

    fn id(&self) -> String {
        self.kind.as_str().into()
    }

    fn metric(&self) -> MetricKind {
        MetricKind::Accuracy
    }

    fn sample_batch(&self, batch_size: usize, rng: &mut SeededRng) -> SequenceBatch {
        self.sample(batch_size, rng)
    }
}
