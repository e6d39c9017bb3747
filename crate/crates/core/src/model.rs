//! A small pre-LN transformer encoder classifier whose attention projections
//! accept adapters.
//!
//! Activations are column-major: a batch of sequences is one `d_model x N`
//! matrix whose columns are the tokens of every sequence laid end to end.
//! Attention runs per sequence and per head, so sequences never interact.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::adapters::{
    init_lora, init_symlora, AdaptedLinear, Adapter, AdapterKind, BaseLinear, DEFAULT_INIT_STD, SYM_LAMBDA,
};
use crate::error::{Error, Result};
use crate::numerics::{gaussian_matrix, Elementwise, Fnv1a, Matrix, NodeId, ParamId, ParamSet, SeededRng, Tape, Trainability};
use crate::scalar::Scalar;
use crate::tasks::{SequenceBatch, ToySequenceTask};
use crate::training::{adapter_invariants, train, InvariantCheck, Learner, TrainConfig, TrainResult};

const LN_EPS: f64 = 1e-5;
const EVAL_CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TinyTransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_seq_len: usize,
    pub n_classes: usize,
    pub d_ff: usize,
    pub seed: u64,
}

impl Default for TinyTransformerConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            max_seq_len: 32,
            n_classes: 2,
            d_ff: 128,
            seed: 0,
        }
    }
}

impl TinyTransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("max_seq_len", self.max_seq_len),
            ("n_classes", self.n_classes),
            ("d_ff", self.d_ff),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// One of the four square attention projections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
}

impl Projection {
    pub const ALL: [Self; 4] = [Self::Query, Self::Key, Self::Value, Self::Output];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Query => "query",
            Self::Key => "key",
            Self::Value => "value",
            Self::Output => "output",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl std::str::FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown projection {s:?}")))
    }
}

/// Which projections get adapters, and how.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectionPolicy {
    pub kind: AdapterKind,
    pub targets: BTreeSet<Projection>,
    pub rank: usize,
    pub alpha: f64,
    pub init_std: f64,
    /// Share one SymLoRA `λ` across the adapted matrices of each layer.
    pub tie_lambda: bool,
}

impl InjectionPolicy {
    /// Query and value adapters of rank 8 with `α = r`.
    pub fn new(kind: AdapterKind) -> Self {
        Self {
            kind,
            targets: [Projection::Query, Projection::Value].into_iter().collect(),
            rank: 8,
            alpha: 8.0,
            init_std: DEFAULT_INIT_STD,
            tie_lambda: false,
        }
    }

    /// Sets the rank and keeps `α` equal to it.
    pub fn with_rank(mut self, rank: usize) -> Self {
        self.rank = rank;
        self.alpha = rank as f64;
        self
    }
}

impl Default for InjectionPolicy {
    fn default() -> Self {
        Self::new(AdapterKind::Symlora)
    }
}

/// What a tensor is for; decides whether it trains in a given [`TrainScope`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Base,
    Adapter,
    Head,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainScope {
    /// Adapters and the classifier head train; the base is frozen.
    #[default]
    FineTune,
    /// Everything trains (used to pretrain the base).
    Full,
}

impl TrainScope {
    pub fn trains(self, role: Role) -> bool {
        match self {
            Self::Full => true,
            Self::FineTune => role != Role::Base,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: Matrix<T>,
    pub bias: Matrix<T>,
}

impl<T: Scalar> LayerNorm<T> {
    fn new(d: usize) -> Self {
        Self {
            gain: Matrix::filled(d, 1, T::one()),
            bias: Matrix::zeros(d, 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<T> {
    pub w1: Matrix<T>,
    pub b1: Matrix<T>,
    pub w2: Matrix<T>,
    pub b2: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ln1: LayerNorm<T>,
    /// Query, key, value and output projections, in [`Projection::ALL`] order.
    pub attention: [AdaptedLinear<T>; 4],
    pub tie_lambda: bool,
    pub ln2: LayerNorm<T>,
    pub ff: FeedForward<T>,
}

impl<T: Scalar> Block<T> {
    pub fn projection(&self, p: Projection) -> &AdaptedLinear<T> {
        &self.attention[p.index()]
    }

    pub fn projection_mut(&mut self, p: Projection) -> &mut AdaptedLinear<T> {
        &mut self.attention[p.index()]
    }

    fn tied_lambda(&self) -> Option<T> {
        if !self.tie_lambda {
            return None;
        }
        self.attention
            .iter()
            .find_map(|l| l.adapter().and_then(Adapter::lambda_scale))
    }
}

/// The transformer plus any attached adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedModel<T> {
    config: TinyTransformerConfig,
    pub token_embedding: Matrix<T>,
    pub position_embedding: Matrix<T>,
    pub blocks: Vec<Block<T>>,
    pub final_ln: LayerNorm<T>,
    pub head_weight: Matrix<T>,
    pub head_bias: Matrix<T>,
    scope: TrainScope,
}

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

fn pid(s: String) -> ParamId {
    ParamId(s)
}

/// Deterministic random base from `cfg.seed`.
pub fn build_model<T: Scalar>(cfg: &TinyTransformerConfig) -> Result<AdaptedModel<T>> {
    cfg.validate()?;
    let d = cfg.d_model;
    let root = SeededRng::new(cfg.seed);
    let rng = |stream: u64| root.derive(stream);
    let proj_std = T::lit(1.0 / (d as f64).sqrt());
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let mut r = rng(100 + l as u64);
        let attention = Projection::ALL.map(|p| {
            AdaptedLinear::new(BaseLinear::new(
                gaussian_matrix(d, d, proj_std, &mut r),
                l,
                format!("layer{l}.attention.{}", p.as_str()),
            ))
        });
        let ff = FeedForward {
            w1: gaussian_matrix(cfg.d_ff, d, proj_std, &mut r),
            b1: Matrix::zeros(cfg.d_ff, 1),
            w2: gaussian_matrix(d, cfg.d_ff, T::lit(1.0 / (cfg.d_ff as f64).sqrt()), &mut r),
            b2: Matrix::zeros(d, 1),
        };
        blocks.push(Block {
            ln1: LayerNorm::new(d),
            attention,
            tie_lambda: false,
            ln2: LayerNorm::new(d),
            ff,
        });
    }
    Ok(AdaptedModel {
        config: cfg.clone(),
        token_embedding: gaussian_matrix(d, cfg.vocab_size, T::one(), &mut rng(1)),
        position_embedding: gaussian_matrix(d, cfg.max_seq_len, T::lit(0.5), &mut rng(2)),
        blocks,
        final_ln: LayerNorm::new(d),
        head_weight: gaussian_matrix(cfg.n_classes, d, proj_std, &mut rng(3)),
        head_bias: Matrix::zeros(cfg.n_classes, 1),
        scope: TrainScope::FineTune,
    })
}

impl<T: Scalar> AdaptedModel<T> {
    pub fn config(&self) -> &TinyTransformerConfig {
        &self.config
    }

    pub fn scope(&self) -> TrainScope {
        self.scope
    }

    pub fn set_scope(&mut self, scope: TrainScope) {
        self.scope = scope;
    }

    /// Every adapted-or-adaptable projection, layer by layer.
    pub fn layers(&self) -> impl Iterator<Item = &AdaptedLinear<T>> {
        self.blocks.iter().flat_map(|b| b.attention.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut AdaptedLinear<T>> {
        self.blocks.iter_mut().flat_map(|b| b.attention.iter_mut())
    }

    pub fn layer(&self, name: &str) -> Option<&AdaptedLinear<T>> {
        self.layers().find(|l| l.name() == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut AdaptedLinear<T>> {
        self.layers_mut().find(|l| l.name() == name)
    }

    pub fn adapters(&self) -> impl Iterator<Item = &Adapter<T>> {
        self.layers().filter_map(AdaptedLinear::adapter)
    }

    pub fn adapter_count(&self) -> usize {
        self.adapters().count()
    }

    /// Wraps the policy's target projections; returns how many adapters were
    /// attached. Each adapter draws from its own stream derived from `rng`.
    pub fn inject_adapters(&mut self, policy: &InjectionPolicy, rng: &SeededRng) -> Result<usize> {
        if policy.kind == AdapterKind::None {
            return Ok(0);
        }
        if !(policy.alpha > 0.0) || !(policy.init_std > 0.0) {
            return Err(Error::InvalidConfig("alpha and init_std must be positive".into()));
        }
        let d = self.config.d_model;
        let alpha = T::lit(policy.alpha);
        let std = T::lit(policy.init_std);
        let mut built = Vec::new();
        for (l, _) in self.blocks.iter().enumerate() {
            for &p in &policy.targets {
                let mut r = rng.derive((l * Projection::ALL.len() + p.index()) as u64);
                let adapter = match policy.kind {
                    AdapterKind::Lora => Adapter::Lora(init_lora(d, d, policy.rank, alpha, std, &mut r)?),
                    AdapterKind::Symlora => Adapter::SymLora(init_symlora(d, policy.rank, alpha, std, &mut r)?),
                    AdapterKind::None => unreachable!(),
                };
                built.push((l, p, adapter));
            }
        }
        let count = built.len();
        for (l, p, adapter) in built {
            self.blocks[l].projection_mut(p).attach(adapter)?;
        }
        let tie = policy.tie_lambda && policy.kind == AdapterKind::Symlora;
        for block in &mut self.blocks {
            block.tie_lambda = tie;
        }
        Ok(count)
    }

    /// Detaches every adapter; returns how many were removed.
    pub fn remove_adapters(&mut self) -> usize {
        for block in &mut self.blocks {
            block.tie_lambda = false;
        }
        self.layers_mut().filter_map(|l| l.detach()).count()
    }

    pub fn set_tie_lambda(&mut self, tie: bool) {
        for block in &mut self.blocks {
            block.tie_lambda = tie;
        }
    }

    pub fn tie_lambda(&self) -> bool {
        self.blocks.iter().any(|b| b.tie_lambda)
    }

    /// Fresh classifier head drawn from `rng`.
    pub fn reset_head(&mut self, rng: &mut SeededRng) {
        let d = self.config.d_model;
        let c = self.config.n_classes;
        self.head_weight = gaussian_matrix(c, d, T::lit(1.0 / (d as f64).sqrt()), rng);
        self.head_bias = Matrix::zeros(c, 1);
    }

    /// All named tensors with their role, in a fixed canonical order.
    ///
    /// When `λ` is tied within a layer, that layer lists one shared
    /// `layer{l}.attention.sym_lambda` entry instead of per-matrix ones.
    pub fn named_tensors(&self) -> Vec<(ParamId, Role, Matrix<T>)> {
        let mut out = vec![
            (pid("embed.token".into()), Role::Base, self.token_embedding.clone()),
            (pid("embed.position".into()), Role::Base, self.position_embedding.clone()),
        ];
        for (l, block) in self.blocks.iter().enumerate() {
            let ln = |name: &str, n: &LayerNorm<T>| {
                [
                    (pid(format!("layer{l}.{name}.gain")), Role::Base, n.gain.clone()),
                    (pid(format!("layer{l}.{name}.bias")), Role::Base, n.bias.clone()),
                ]
            };
            out.extend(ln("ln1", &block.ln1));
            for layer in &block.attention {
                out.push((pid(layer.name().to_string()), Role::Base, layer.base().weight().clone()));
                if let Some(adapter) = layer.adapter() {
                    for (suffix, value) in adapter.tensors() {
                        if block.tie_lambda && suffix == SYM_LAMBDA {
                            continue;
                        }
                        out.push((layer.param_id(suffix), Role::Adapter, value.clone()));
                    }
                }
            }
            if let Some(lambda) = block.tied_lambda() {
                out.push((pid(format!("layer{l}.attention.{SYM_LAMBDA}")), Role::Adapter, Matrix::scalar(lambda)));
            }
            out.extend(ln("ln2", &block.ln2));
            for (name, value) in [("w1", &block.ff.w1), ("b1", &block.ff.b1), ("w2", &block.ff.w2), ("b2", &block.ff.b2)] {
                out.push((pid(format!("layer{l}.ff.{name}")), Role::Base, value.clone()));
            }
        }
        out.push((pid("final_ln.gain".into()), Role::Base, self.final_ln.gain.clone()));
        out.push((pid("final_ln.bias".into()), Role::Base, self.final_ln.bias.clone()));
        out.push((pid(HEAD_WEIGHT.into()), Role::Head, self.head_weight.clone()));
        out.push((pid(HEAD_BIAS.into()), Role::Head, self.head_bias.clone()));
        out
    }

    /// Number of scalar entries that train under the current scope.
    pub fn trainable_param_count(&self) -> usize {
        self.named_tensors()
            .iter()
            .filter(|(_, role, _)| self.scope.trains(*role))
            .map(|(_, _, m)| m.len())
            .sum()
    }

    pub fn head_param_count(&self) -> usize {
        self.head_weight.len() + self.head_bias.len()
    }

    /// FNV-1a over every base tensor, in canonical order.
    pub fn base_fingerprint(&self) -> u64 {
        self.fingerprint_where(|role| role == Role::Base)
    }

    fn fingerprint_where(&self, keep: impl Fn(Role) -> bool) -> u64 {
        let mut h = Fnv1a::new();
        for (id, role, value) in self.named_tensors() {
            if keep(role) {
                crate::store::hash_tensor(&mut h, id.as_str(), &value);
            }
        }
        h.finish()
    }

    /// Overwrites one named tensor (see [`Self::named_tensors`]).
    pub fn set_named_tensor(&mut self, id: &ParamId, value: Matrix<T>) -> Result<()> {
        let name = id.as_str();
        let slot: &mut Matrix<T> = if let Some(slot) = self.base_slot(name) {
            slot
        } else {
            return self.set_adapter_tensor(name, value);
        };
        if slot.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_named_tensor",
                left_rows: slot.rows(),
                left_cols: slot.cols(),
                right_rows: value.rows(),
                right_cols: value.cols(),
            });
        }
        *slot = value;
        Ok(())
    }

    fn base_slot(&mut self, name: &str) -> Option<&mut Matrix<T>> {
        match name {
            "embed.token" => return Some(&mut self.token_embedding),
            "embed.position" => return Some(&mut self.position_embedding),
            "final_ln.gain" => return Some(&mut self.final_ln.gain),
            "final_ln.bias" => return Some(&mut self.final_ln.bias),
            HEAD_WEIGHT => return Some(&mut self.head_weight),
            HEAD_BIAS => return Some(&mut self.head_bias),
            _ => {}
        }
        let rest = name.strip_prefix("layer")?;
        let (l, rest) = rest.split_once('.')?;
        let block = self.blocks.get_mut(l.parse::<usize>().ok()?)?;
        match rest {
            "ln1.gain" => Some(&mut block.ln1.gain),
            "ln1.bias" => Some(&mut block.ln1.bias),
            "ln2.gain" => Some(&mut block.ln2.gain),
            "ln2.bias" => Some(&mut block.ln2.bias),
            "ff.w1" => Some(&mut block.ff.w1),
            "ff.b1" => Some(&mut block.ff.b1),
            "ff.w2" => Some(&mut block.ff.w2),
            "ff.b2" => Some(&mut block.ff.b2),
            other => {
                let p: Projection = other.strip_prefix("attention.")?.parse().ok()?;
                Some(block.projection_mut(p).base_mut().weight_mut())
            }
        }
    }

    fn set_adapter_tensor(&mut self, name: &str, value: Matrix<T>) -> Result<()> {
        let unknown = || Error::MissingParameter(name.to_string());
        let (layer_name, suffix) = name.rsplit_once('.').ok_or_else(unknown)?;
        if suffix == SYM_LAMBDA {
            // Shared λ: `layer{l}.attention.sym_lambda`.
            if let Some(l) = layer_name
                .strip_prefix("layer")
                .and_then(|s| s.strip_suffix(".attention"))
                .and_then(|s| s.parse::<usize>().ok())
            {
                let block = self.blocks.get_mut(l).ok_or_else(unknown)?;
                let mut any = false;
                for layer in &mut block.attention {
                    if let Some(adapter @ Adapter::SymLora(_)) = layer.adapter_mut() {
                        adapter.set_tensor(SYM_LAMBDA, value.clone())?;
                        any = true;
                    }
                }
                return if any { Ok(()) } else { Err(unknown()) };
            }
        }
        let layer = self.layer_mut(layer_name).ok_or_else(unknown)?;
        layer.adapter_mut().ok_or_else(unknown)?.set_tensor(suffix, value)
    }

    fn check_batch(&self, batch: &[Vec<usize>]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::InvalidConfig("empty token batch".into()));
        }
        for seq in batch {
            if seq.is_empty() {
                return Err(Error::InvalidConfig("empty sequence".into()));
            }
            if seq.len() > self.config.max_seq_len {
                return Err(Error::SequenceTooLong {
                    len: seq.len(),
                    max: self.config.max_seq_len,
                });
            }
            if let Some(&token) = seq.iter().find(|&&t| t >= self.config.vocab_size) {
                return Err(Error::OutOfVocab {
                    token,
                    vocab_size: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    fn leaf(&self, tape: &mut Tape<T>, name: String, role: Role, value: &Matrix<T>, scope: Option<TrainScope>) -> NodeId {
        let trainable = scope.is_some_and(|s| s.trains(role));
        tape.leaf(ParamId(name), value.clone(), Trainability::from_flag(trainable))
    }

    fn layer_norm(&self, tape: &mut Tape<T>, x: NodeId, ln: &LayerNorm<T>, name: String, scope: Option<TrainScope>) -> Result<NodeId> {
        let gain = self.leaf(tape, format!("{name}.gain"), Role::Base, &ln.gain, scope);
        let bias = self.leaf(tape, format!("{name}.bias"), Role::Base, &ln.bias, scope);
        let normed = tape.layer_norm_cols(x, T::lit(LN_EPS));
        let scaled = tape.scale_rows(normed, gain)?;
        tape.add_column(scaled, bias)
    }

    /// Records the forward pass and returns the `n_classes x batch` logits.
    ///
    /// With `scope = None` every leaf is frozen (inference); otherwise leaves
    /// are trainable according to their role.
    pub fn forward_tape(&self, tape: &mut Tape<T>, batch: &[Vec<usize>], scope: Option<TrainScope>) -> Result<NodeId> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let spans: Vec<(usize, usize)> = batch
            .iter()
            .scan(0, |offset, seq| {
                let span = (*offset, seq.len());
                *offset += seq.len();
                Some(span)
            })
            .collect();
        let total: usize = batch.iter().map(Vec::len).sum();
        let tokens: Vec<usize> = batch.iter().flatten().copied().collect();
        let positions: Vec<usize> = batch.iter().flat_map(|s| 0..s.len()).collect();

        let emb = self.leaf(tape, "embed.token".into(), Role::Base, &self.token_embedding, scope);
        let pos = self.leaf(tape, "embed.position".into(), Role::Base, &self.position_embedding, scope);
        let te = tape.gather_cols(emb, &tokens)?;
        let pe = tape.gather_cols(pos, &positions)?;
        let mut x = tape.add(te, pe)?;

        let train_base = scope.is_some_and(|s| s.trains(Role::Base));
        let dh = cfg.head_dim();
        let inv_sqrt = T::one() / T::from_count(dh).sqrt();
        for (l, block) in self.blocks.iter().enumerate() {
            let h = self.layer_norm(tape, x, &block.ln1, format!("layer{l}.ln1"), scope)?;
            let shared = block
                .tied_lambda()
                .map(|v| self.leaf(tape, format!("layer{l}.attention.{SYM_LAMBDA}"), Role::Adapter, &Matrix::scalar(v), scope));
            let q = block.projection(Projection::Query).forward_tape(tape, h, train_base, shared)?;
            let k = block.projection(Projection::Key).forward_tape(tape, h, train_base, shared)?;
            let v = block.projection(Projection::Value).forward_tape(tape, h, train_base, shared)?;
            let mut per_seq = Vec::with_capacity(batch.len());
            for &(start, len) in &spans {
                let cols: Vec<usize> = (start..start + len).collect();
                let (qs, ks, vs) = (tape.gather_cols(q, &cols)?, tape.gather_cols(k, &cols)?, tape.gather_cols(v, &cols)?);
                let mut heads = Vec::with_capacity(cfg.n_heads);
                for head in 0..cfg.n_heads {
                    let qh = tape.rows_slice(qs, head * dh, dh)?;
                    let kh = tape.rows_slice(ks, head * dh, dh)?;
                    let vh = tape.rows_slice(vs, head * dh, dh)?;
                    let scores = tape.matmul_tn(qh, kh)?;
                    let scores = tape.scale(scores, inv_sqrt);
                    let attn = tape.softmax_rows(scores);
                    heads.push(tape.matmul_nt(vh, attn)?);
                }
                per_seq.push(tape.concat_rows(&heads)?);
            }
            let mixed = if per_seq.len() == 1 { per_seq[0] } else { tape.concat_cols(&per_seq)? };
            let attended = block.projection(Projection::Output).forward_tape(tape, mixed, train_base, shared)?;
            x = tape.add(x, attended)?;

            let h = self.layer_norm(tape, x, &block.ln2, format!("layer{l}.ln2"), scope)?;
            let w1 = self.leaf(tape, format!("layer{l}.ff.w1"), Role::Base, &block.ff.w1, scope);
            let b1 = self.leaf(tape, format!("layer{l}.ff.b1"), Role::Base, &block.ff.b1, scope);
            let w2 = self.leaf(tape, format!("layer{l}.ff.w2"), Role::Base, &block.ff.w2, scope);
            let b2 = self.leaf(tape, format!("layer{l}.ff.b2"), Role::Base, &block.ff.b2, scope);
            let hidden = tape.matmul(w1, h)?;
            let hidden = tape.add_column(hidden, b1)?;
            let hidden = tape.map(hidden, Elementwise::Gelu);
            let out = tape.matmul(w2, hidden)?;
            let out = tape.add_column(out, b2)?;
            x = tape.add(x, out)?;
        }
        let x = self.layer_norm(tape, x, &self.final_ln, "final_ln".into(), scope)?;
        let mut pool = Matrix::zeros(total, batch.len());
        for (b, &(start, len)) in spans.iter().enumerate() {
            let w = T::one() / T::from_count(len);
            for t in start..start + len {
                pool[(t, b)] = w;
            }
        }
        let pool = tape.constant(pool);
        let pooled = tape.matmul(x, pool)?;
        let hw = self.leaf(tape, HEAD_WEIGHT.into(), Role::Head, &self.head_weight, scope);
        let hb = self.leaf(tape, HEAD_BIAS.into(), Role::Head, &self.head_bias, scope);
        let logits = tape.matmul(hw, pooled)?;
        tape.add_column(logits, hb)
    }

    /// Predicted class per sequence (ties go to the lower class id).
    pub fn predict(&self, batch: &[Vec<usize>]) -> Result<Vec<usize>> {
        let logits = model_forward(self, batch)?;
        Ok((0..logits.rows())
            .map(|i| {
                let row = logits.row(i);
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect())
    }

    pub fn accuracy(&self, batch: &SequenceBatch) -> Result<f64> {
        let mut correct = 0usize;
        for (tokens, labels) in batch.tokens.chunks(EVAL_CHUNK).zip(batch.labels.chunks(EVAL_CHUNK)) {
            let pred = self.predict(tokens)?;
            correct += pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        }
        Ok(correct as f64 / batch.labels.len() as f64)
    }

    /// Mean cross-entropy on `batch`.
    pub fn loss_on(&self, batch: &SequenceBatch) -> Result<f64> {
        let mut tape = Tape::new();
        let logits = self.forward_tape(&mut tape, &batch.tokens, None)?;
        let loss = tape.cross_entropy_cols(logits, &batch.labels)?;
        Ok(tape.scalar_value(loss).map_or(f64::NAN, |v| v.as_f64()))
    }
}

/// `batch x n_classes` logits.
pub fn model_forward<T: Scalar>(model: &AdaptedModel<T>, batch: &[Vec<usize>]) -> Result<Matrix<T>> {
    let mut tape = Tape::new();
    let logits = model.forward_tape(&mut tape, batch, None)?;
    Ok(tape.value(logits).transpose())
}

/// Trains every base tensor (and the head) on `task`, then refreezes.
pub fn pretrain_base<T: Scalar>(
    model: &mut AdaptedModel<T>,
    task: &ToySequenceTask,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    if model.adapter_count() > 0 {
        return Err(Error::InvalidConfig("pretraining expects a model without adapters".into()));
    }
    model.set_scope(TrainScope::Full);
    let result = train(model, task, cfg);
    model.set_scope(TrainScope::FineTune);
    result
}

impl<T: Scalar> Learner<T, ToySequenceTask> for AdaptedModel<T> {
    fn loss(&self, tape: &mut Tape<T>, batch: &SequenceBatch) -> Result<NodeId> {
        let logits = self.forward_tape(tape, &batch.tokens, Some(self.scope))?;
        tape.cross_entropy_cols(logits, &batch.labels)
    }

    fn trainable_params(&self) -> ParamSet<T> {
        self.named_tensors()
            .into_iter()
            .filter(|(_, role, _)| self.scope.trains(*role))
            .map(|(id, _, value)| (id, value))
            .collect()
    }

    fn set_trainable_params(&mut self, params: &ParamSet<T>) -> Result<()> {
        for (id, value) in params {
            self.set_named_tensor(id, value.clone())?;
        }
        Ok(())
    }

    fn evaluate(&self, task: &ToySequenceTask) -> Result<f64> {
        self.accuracy(&task.eval_batch())
    }

    fn frozen_fingerprint(&self) -> u64 {
        let scope = self.scope;
        self.fingerprint_where(|role| !scope.trains(role))
    }

    fn invariants(&self) -> Result<Option<InvariantCheck>> {
        adapter_invariants(self.adapters())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::SequenceTaskKind;

    fn small() -> TinyTransformerConfig {
        TinyTransformerConfig {
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 8,
            ..TinyTransformerConfig::default()
        }
    }

    fn random_batch(cfg: &TinyTransformerConfig, b: usize, t: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut rng = SeededRng::new(seed);
        (0..b).map(|_| (0..t).map(|_| rng.below(cfg.vocab_size)).collect()).collect()
    }

    #[test]
    fn config_validation() {
        assert!(TinyTransformerConfig::default().validate().is_ok());
        let bad = TinyTransformerConfig {
            d_model: 65,
            ..TinyTransformerConfig::default()
        };
        assert!(matches!(build_model::<f64>(&bad), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn build_is_deterministic_and_shaped() {
        let cfg = TinyTransformerConfig::default();
        let a = build_model::<f64>(&cfg).unwrap();
        let b = build_model::<f64>(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.blocks.len(), 2);
        for p in Projection::ALL {
            for block in &a.blocks {
                assert_eq!(block.projection(p).base().weight().shape(), (64, 64));
            }
        }
    }

    #[test]
    fn default_policy_targets_query_and_value() {
        let p = InjectionPolicy::default();
        assert_eq!(p.targets, [Projection::Query, Projection::Value].into_iter().collect());
        assert_eq!(p.rank, 8);
        assert_eq!(p.alpha, 8.0);
    }

    #[test]
    fn injection_count_and_identity() {
        let cfg = TinyTransformerConfig::default();
        let mut m = build_model::<f64>(&cfg).unwrap();
        let batch = random_batch(&cfg, 4, 6, 1);
        let before = model_forward(&m, &batch).unwrap();
        let n = m.inject_adapters(&InjectionPolicy::default(), &SeededRng::new(5)).unwrap();
        assert_eq!(n, 4);
        let after = model_forward(&m, &batch).unwrap();
        assert!(before.max_abs_diff(&after).unwrap() <= 1e-12);
        m.remove_adapters();
        assert_eq!(model_forward(&m, &batch).unwrap(), before);
    }

    #[test]
    fn none_policy_is_noop() {
        let cfg = small();
        let mut m = build_model::<f64>(&cfg).unwrap();
        let copy = m.clone();
        assert_eq!(m.inject_adapters(&InjectionPolicy::new(AdapterKind::None), &SeededRng::new(0)).unwrap(), 0);
        assert_eq!(m, copy);
    }

    #[test]
    fn forward_errors() {
        let cfg = small();
        let m = build_model::<f64>(&cfg).unwrap();
        assert!(matches!(model_forward(&m, &[vec![16]]), Err(Error::OutOfVocab { .. })));
        assert!(matches!(model_forward(&m, &[vec![0; 9]]), Err(Error::SequenceTooLong { .. })));
    }

    #[test]
    fn batch_independence() {
        let cfg = small();
        let m = build_model::<f64>(&cfg).unwrap();
        let batch = random_batch(&cfg, 8, 5, 2);
        let all = model_forward(&m, &batch).unwrap();
        for (i, seq) in batch.iter().enumerate() {
            let one = model_forward(&m, std::slice::from_ref(seq)).unwrap();
            for c in 0..cfg.n_classes {
                assert!((one[(0, c)] - all[(i, c)]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn symlora_census() {
        let cfg = small();
        let mut m = build_model::<f64>(&cfg).unwrap();
        let policy = InjectionPolicy::new(AdapterKind::Symlora).with_rank(4);
        let count = m.inject_adapters(&policy, &SeededRng::new(0)).unwrap();
        let n = cfg.d_model;
        assert_eq!(m.trainable_param_count(), count * ((n + 1) * 4 + 1) + m.head_param_count());
    }

    #[test]
    fn tied_lambda_shares_one_scalar() {
        let cfg = small();
        let mut m = build_model::<f64>(&cfg).unwrap();
        let policy = InjectionPolicy {
            tie_lambda: true,
            ..InjectionPolicy::new(AdapterKind::Symlora).with_rank(2)
        };
        m.inject_adapters(&policy, &SeededRng::new(0)).unwrap();
        let lambdas: Vec<_> = m
            .named_tensors()
            .into_iter()
            .filter(|(id, _, _)| id.as_str().ends_with(SYM_LAMBDA))
            .map(|(id, _, _)| id.0)
            .collect();
        assert_eq!(lambdas, ["layer0.attention.sym_lambda", "layer1.attention.sym_lambda"]);
        m.set_named_tensor(&ParamId::from("layer0.attention.sym_lambda"), Matrix::scalar(0.5))
            .unwrap();
        let block = &m.blocks[0];
        for p in [Projection::Query, Projection::Value] {
            assert_eq!(block.projection(p).adapter().unwrap().lambda_scale(), Some(0.5));
        }
    }

    #[test]
    fn untrained_accuracy_near_chance() {
        let cfg = small();
        let m = build_model::<f64>(&cfg).unwrap();
        let task = ToySequenceTask::new(SequenceTaskKind::Parity, cfg.vocab_size, 6, 2, 3)
            .unwrap()
            .with_eval_size(1000);
        let acc = m.accuracy(&task.eval_batch()).unwrap();
        assert!((0.35..=0.65).contains(&acc), "accuracy {acc}");
    }

    #[test]
    fn pretrain_zero_steps_is_noop_and_rejects_adapters() {
        let cfg = small();
        let mut m = build_model::<f64>(&cfg).unwrap();
        let copy = m.clone();
        let task = ToySequenceTask::new(SequenceTaskKind::Majority, cfg.vocab_size, 6, 2, 0).unwrap();
        let tc = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        pretrain_base(&mut m, &task, &tc).unwrap();
        assert_eq!(m, copy);
        m.inject_adapters(&InjectionPolicy::default().with_rank(2), &SeededRng::new(0)).unwrap();
        assert!(pretrain_base(&mut m, &task, &tc).is_err());
    }
}
