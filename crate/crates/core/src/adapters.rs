//! Low-rank adapters on frozen linear maps.
//!
//! Two adapter kinds share one frozen [`BaseLinear`]:
//!
//! * [`LoraAdapter`]: `h = W0 x + (α/r) B A x`, with `B ∈ ℝ^{n×r}` zero at
//!   init and `A ∈ ℝ^{r×m}` Gaussian.
//! * [`SymLoraAdapter`]: `h = λ W0 x + (α/r) Q diag(Λ) Qᵀ x`, with
//!   `Q ∈ ℝ^{n×r}` Gaussian, spectrum `Λ = 0` and base scale `λ = 1` at init.
//!   The update is symmetric with rank at most `r`, and needs `(n+1)·r`
//!   numbers (plus the scalar `λ`) instead of LoRA's `2·n·r`.
//!
//! Neither forward pass materializes the update matrix; [`AdaptedLinear::merge`]
//! does, for single-product inference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gaussian_matrix, singular_values, symmetric_eigen, Matrix, NodeId, ParamId, SeededRng, Tape, Trainability};
use crate::scalar::Scalar;

pub const LORA_A: &str = "lora_a";
pub const LORA_B: &str = "lora_b";
pub const SYM_Q: &str = "sym_q";
pub const SYM_SPECTRUM: &str = "sym_spectrum";
pub const SYM_LAMBDA: &str = "sym_lambda";

/// Default standard deviation of the Gaussian factor at initialization.
pub const DEFAULT_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    None,
    Lora,
    Symlora,
}

impl AdapterKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Lora => "lora",
            Self::Symlora => "symlora",
        }
    }
}

impl std::str::FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "lora" => Ok(Self::Lora),
            "symlora" => Ok(Self::Symlora),
            other => Err(Error::InvalidConfig(format!("unknown adapter kind {other:?}"))),
        }
    }
}

/// A frozen pretrained weight `W0` with its position in the network.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseLinear<T> {
    weight: Matrix<T>,
    layer_index: usize,
    name: String,
}

impl<T: Scalar> BaseLinear<T> {
    pub fn new(weight: Matrix<T>, layer_index: usize, name: impl Into<String>) -> Self {
        Self {
            weight,
            layer_index,
            name: name.into(),
        }
    }

    pub fn weight(&self) -> &Matrix<T> {
        &self.weight
    }

    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Replaces `W0`. Only base pretraining uses this; adapters never do.
    pub(crate) fn weight_mut(&mut self) -> &mut Matrix<T> {
        &mut self.weight
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T> {
    b: Matrix<T>,
    a: Matrix<T>,
    rank: usize,
    alpha: T,
    init_std: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SymLoraAdapter<T> {
    q: Matrix<T>,
    /// `r x 1`
    spectrum: Matrix<T>,
    /// `1 x 1`
    lambda_scale: Matrix<T>,
    rank: usize,
    alpha: T,
    init_std: T,
}

fn check_rank(rank: usize, max: usize) -> Result<()> {
    if rank == 0 || rank > max {
        return Err(Error::RankOutOfRange { rank, max });
    }
    Ok(())
}

fn check_positive<T: Scalar>(value: T, what: &str) -> Result<()> {
    if !(value > T::zero()) || !value.is_finite() {
        return Err(Error::InvalidConfig(format!("{what} must be positive, got {value}")));
    }
    Ok(())
}

/// LoRA factors for an `n x m` base: `A ~ N(0, init_std²)`, `B = 0`.
pub fn init_lora<T: Scalar>(
    n: usize,
    m: usize,
    rank: usize,
    alpha: T,
    init_std: T,
    rng: &mut SeededRng,
) -> Result<LoraAdapter<T>> {
    check_rank(rank, n.min(m))?;
    check_positive(alpha, "alpha")?;
    check_positive(init_std, "init_std")?;
    let a = gaussian_matrix(rank, m, init_std, rng);
    Ok(LoraAdapter {
        b: Matrix::zeros(n, rank),
        a,
        rank,
        alpha,
        init_std,
    })
}

/// SymLoRA factors for an `n x n` base: `Q ~ N(0, init_std²)`, `Λ = 0`,
/// `λ = 1`, so the adapted layer starts out equal to the base layer.
pub fn init_symlora<T: Scalar>(
    n: usize,
    rank: usize,
    alpha: T,
    init_std: T,
    rng: &mut SeededRng,
) -> Result<SymLoraAdapter<T>> {
    check_rank(rank, n)?;
    check_positive(alpha, "alpha")?;
    check_positive(init_std, "init_std")?;
    let q = gaussian_matrix(n, rank, init_std, rng);
    Ok(SymLoraAdapter {
        q,
        spectrum: Matrix::zeros(rank, 1),
        lambda_scale: Matrix::scalar(T::one()),
        rank,
        alpha,
        init_std,
    })
}

impl<T: Scalar> LoraAdapter<T> {
    /// Builds an adapter from explicit factors.
    pub fn from_factors(b: Matrix<T>, a: Matrix<T>, alpha: T, init_std: T) -> Result<Self> {
        let rank = b.cols();
        if a.rows() != rank {
            return Err(Error::ShapeMismatch {
                op: "lora factors",
                left_rows: b.rows(),
                left_cols: b.cols(),
                right_rows: a.rows(),
                right_cols: a.cols(),
            });
        }
        check_rank(rank, b.rows().min(a.cols()))?;
        check_positive(alpha, "alpha")?;
        Ok(Self {
            b,
            a,
            rank,
            alpha,
            init_std,
        })
    }

    pub fn b(&self) -> &Matrix<T> {
        &self.b
    }

    pub fn a(&self) -> &Matrix<T> {
        &self.a
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn init_std(&self) -> T {
        self.init_std
    }

    pub fn scaling(&self) -> T {
        self.alpha / T::from_count(self.rank)
    }

    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    /// `(α/r) B A`
    pub fn delta_weight(&self) -> Matrix<T> {
        self.b
            .matmul(&self.a)
            .expect("factor shapes fixed at construction")
            .scale(self.scaling())
    }
}

impl<T: Scalar> SymLoraAdapter<T> {
    pub fn from_factors(q: Matrix<T>, spectrum: &[T], lambda_scale: T, alpha: T, init_std: T) -> Result<Self> {
        let rank = q.cols();
        if spectrum.len() != rank {
            return Err(Error::InvalidData {
                expected: rank,
                actual: spectrum.len(),
            });
        }
        check_rank(rank, q.rows())?;
        check_positive(alpha, "alpha")?;
        Ok(Self {
            q,
            spectrum: Matrix::column(spectrum),
            lambda_scale: Matrix::scalar(lambda_scale),
            rank,
            alpha,
            init_std,
        })
    }

    pub fn q(&self) -> &Matrix<T> {
        &self.q
    }

    pub fn spectrum(&self) -> &[T] {
        self.spectrum.as_slice()
    }

    pub fn lambda_scale(&self) -> T {
        self.lambda_scale[(0, 0)]
    }

    pub fn set_lambda_scale(&mut self, value: T) {
        self.lambda_scale[(0, 0)] = value;
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn init_std(&self) -> T {
        self.init_std
    }

    pub fn scaling(&self) -> T {
        self.alpha / T::from_count(self.rank)
    }

    pub fn dim(&self) -> usize {
        self.q.rows()
    }

    /// `(α/r) Q diag(Λ) Qᵀ`, symmetrized entry-for-entry.
    ///
    /// Entry `(i, j)` is `Σ_k q_ik Λ_k q_jk`, evaluated once for `i <= j` and
    /// mirrored, so the result is exactly symmetric.
    pub fn delta_weight(&self) -> Matrix<T> {
        let n = self.dim();
        let scale = self.scaling();
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            let qi = self.q.row(i);
            for j in i..n {
                let qj = self.q.row(j);
                let mut acc = T::zero();
                for k in 0..self.rank {
                    acc += qi[k] * self.spectrum[(k, 0)] * qj[k];
                }
                let v = acc * scale;
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }
}

/// Either adapter kind.
#[derive(Clone, Debug, PartialEq)]
pub enum Adapter<T> {
    Lora(LoraAdapter<T>),
    SymLora(SymLoraAdapter<T>),
}

impl<T: Scalar> Adapter<T> {
    pub fn kind(&self) -> AdapterKind {
        match self {
            Self::Lora(_) => AdapterKind::Lora,
            Self::SymLora(_) => AdapterKind::Symlora,
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            Self::Lora(a) => a.rank(),
            Self::SymLora(a) => a.rank(),
        }
    }

    pub fn alpha(&self) -> T {
        match self {
            Self::Lora(a) => a.alpha(),
            Self::SymLora(a) => a.alpha(),
        }
    }

    pub fn init_std(&self) -> T {
        match self {
            Self::Lora(a) => a.init_std(),
            Self::SymLora(a) => a.init_std(),
        }
    }

    pub fn delta_weight(&self) -> Matrix<T> {
        match self {
            Self::Lora(a) => a.delta_weight(),
            Self::SymLora(a) => a.delta_weight(),
        }
    }

    /// `λ` for SymLoRA, `None` for LoRA.
    pub fn lambda_scale(&self) -> Option<T> {
        match self {
            Self::Lora(_) => None,
            Self::SymLora(a) => Some(a.lambda_scale()),
        }
    }

    /// Trainable tensors as `(suffix, value)` in canonical order.
    pub fn tensors(&self) -> Vec<(&'static str, &Matrix<T>)> {
        match self {
            Self::Lora(a) => vec![(LORA_B, &a.b), (LORA_A, &a.a)],
            Self::SymLora(a) => vec![
                (SYM_Q, &a.q),
                (SYM_SPECTRUM, &a.spectrum),
                (SYM_LAMBDA, &a.lambda_scale),
            ],
        }
    }

    /// Overwrites one tensor by suffix; the shape must match.
    pub fn set_tensor(&mut self, suffix: &str, value: Matrix<T>) -> Result<()> {
        let slot = match (self, suffix) {
            (Self::Lora(a), LORA_B) => &mut a.b,
            (Self::Lora(a), LORA_A) => &mut a.a,
            (Self::SymLora(a), SYM_Q) => &mut a.q,
            (Self::SymLora(a), SYM_SPECTRUM) => &mut a.spectrum,
            (Self::SymLora(a), SYM_LAMBDA) => &mut a.lambda_scale,
            (_, other) => return Err(Error::MissingParameter(other.to_string())),
        };
        if slot.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_tensor",
                left_rows: slot.rows(),
                left_cols: slot.cols(),
                right_rows: value.rows(),
                right_cols: value.cols(),
            });
        }
        *slot = value;
        Ok(())
    }

    /// `max |ΔW - ΔWᵀ|`; `None` for non-square LoRA updates.
    pub fn symmetry_error(&self) -> Option<T> {
        self.delta_weight().asymmetry().ok()
    }

    /// `σ_{r+1}(ΔW) / σ_1(ΔW)`, zero when `ΔW = 0` or `r` is full rank.
    pub fn rank_ratio(&self) -> Result<T> {
        let sv = singular_values(&self.delta_weight())?;
        let r = self.rank();
        if sv.len() <= r || sv[0] == T::zero() {
            return Ok(T::zero());
        }
        Ok(sv[r] / sv[0])
    }
}

/// Trainable-parameter count of an adapter.
///
/// LoRA: `n·r + r·m` (`2·n·r` for square bases). SymLoRA: `(n+1)·r`, plus
/// one for `λ` when `include_lambda_scale` is set.
pub fn param_count<T: Scalar>(adapter: &Adapter<T>, include_lambda_scale: bool) -> usize {
    match adapter {
        Adapter::Lora(a) => a.out_dim() * a.rank() + a.rank() * a.in_dim(),
        Adapter::SymLora(a) => (a.dim() + 1) * a.rank() + usize::from(include_lambda_scale),
    }
}

/// A frozen base with an optional adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedLinear<T> {
    base: BaseLinear<T>,
    adapter: Option<Adapter<T>>,
}

impl<T: Scalar> AdaptedLinear<T> {
    pub fn new(base: BaseLinear<T>) -> Self {
        Self { base, adapter: None }
    }

    pub fn with_adapter(base: BaseLinear<T>, adapter: Adapter<T>) -> Result<Self> {
        let mut layer = Self::new(base);
        layer.attach(adapter)?;
        Ok(layer)
    }

    pub fn base(&self) -> &BaseLinear<T> {
        &self.base
    }

    pub(crate) fn base_mut(&mut self) -> &mut BaseLinear<T> {
        &mut self.base
    }

    pub fn name(&self) -> &str {
        self.base.name()
    }

    pub fn adapter(&self) -> Option<&Adapter<T>> {
        self.adapter.as_ref()
    }

    pub fn adapter_mut(&mut self) -> Option<&mut Adapter<T>> {
        self.adapter.as_mut()
    }

    /// Attaches an adapter, replacing any existing one. SymLoRA requires a
    /// square base; a non-square base is rejected rather than falling back.
    pub fn attach(&mut self, adapter: Adapter<T>) -> Result<Option<Adapter<T>>> {
        let (n, m) = self.base.weight.shape();
        match &adapter {
            Adapter::SymLora(a) => {
                if n != m {
                    return Err(Error::NonSquare {
                        name: self.base.name.clone(),
                        rows: n,
                        cols: m,
                    });
                }
                if a.dim() != n {
                    return Err(Error::ShapeMismatch {
                        op: "attach symlora",
                        left_rows: n,
                        left_cols: m,
                        right_rows: a.dim(),
                        right_cols: a.dim(),
                    });
                }
            }
            Adapter::Lora(a) => {
                if a.out_dim() != n || a.in_dim() != m {
                    return Err(Error::ShapeMismatch {
                        op: "attach lora",
                        left_rows: n,
                        left_cols: m,
                        right_rows: a.out_dim(),
                        right_cols: a.in_dim(),
                    });
                }
            }
        }
        Ok(self.adapter.replace(adapter))
    }

    pub fn detach(&mut self) -> Option<Adapter<T>> {
        self.adapter.take()
    }

    pub fn param_id(&self, suffix: &str) -> ParamId {
        ParamId(format!("{}.{}", self.base.name, suffix))
    }

    fn check_input(&self, x: &Matrix<T>) -> Result<()> {
        let w = &self.base.weight;
        if x.rows() != w.cols() {
            return Err(Error::ShapeMismatch {
                op: "adapted forward",
                left_rows: w.rows(),
                left_cols: w.cols(),
                right_rows: x.rows(),
                right_cols: x.cols(),
            });
        }
        Ok(())
    }

    /// `h` for a batch of column inputs `x` (`m x k`), using only
    /// matrix-vector style products.
    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_input(x)?;
        let base_out = self.base.weight.matmul(x)?;
        match &self.adapter {
            None => Ok(base_out),
            Some(Adapter::Lora(a)) => {
                let update = a.b.matmul(&a.a.matmul(x)?)?.scale(a.scaling());
                base_out.add(&update)
            }
            Some(Adapter::SymLora(a)) => {
                let scaled_base = base_out.scale(a.lambda_scale());
                let mut projected = a.q.matmul_tn(x)?;
                for k in 0..a.rank {
                    let f = a.spectrum[(k, 0)];
                    projected.row_mut(k).iter_mut().for_each(|v| *v *= f);
                }
                let update = a.q.matmul(&projected)?.scale(a.scaling());
                scaled_base.add(&update)
            }
        }
    }

    /// Records the forward pass on `tape`, registering `W0` (trainable only
    /// when `train_base`) and the adapter tensors (always trainable).
    ///
    /// `shared_lambda` substitutes a pre-registered `λ` node, used when
    /// several adapters tie their base scale.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        x: NodeId,
        train_base: bool,
        shared_lambda: Option<NodeId>,
    ) -> Result<NodeId> {
        self.check_input(tape.value(x))?;
        let w0 = tape.leaf(
            ParamId(self.base.name.clone()),
            self.base.weight.clone(),
            Trainability::from_flag(train_base),
        );
        let base_out = tape.matmul(w0, x)?;
        match &self.adapter {
            None => Ok(base_out),
            Some(Adapter::Lora(a)) => {
                let b = tape.param(self.param_id(LORA_B), a.b.clone());
                let af = tape.param(self.param_id(LORA_A), a.a.clone());
                let ax = tape.matmul(af, x)?;
                let bax = tape.matmul(b, ax)?;
                let update = tape.scale(bax, a.scaling());
                tape.add(base_out, update)
            }
            Some(Adapter::SymLora(a)) => {
                let lambda = match shared_lambda {
                    Some(node) => node,
                    None => tape.param(self.param_id(SYM_LAMBDA), a.lambda_scale.clone()),
                };
                let q = tape.param(self.param_id(SYM_Q), a.q.clone());
                let spectrum = tape.param(self.param_id(SYM_SPECTRUM), a.spectrum.clone());
                let scaled_base = tape.scale_by(base_out, lambda)?;
                let projected = tape.matmul_tn(q, x)?;
                let weighted = tape.scale_rows(projected, spectrum)?;
                let back = tape.matmul(q, weighted)?;
                let update = tape.scale(back, a.scaling());
                tape.add(scaled_base, update)
            }
        }
    }

    /// Dense effective weight: `W0 + ΔW` (LoRA) or `λ W0 + ΔW` (SymLoRA).
    pub fn merge(&self) -> Result<Matrix<T>> {
        match &self.adapter {
            None => Err(Error::NoAdapters),
            Some(Adapter::Lora(a)) => self.base.weight.add(&a.delta_weight()),
            Some(Adapter::SymLora(a)) => self
                .base
                .weight
                .scale(a.lambda_scale())
                .add(&a.delta_weight()),
        }
    }

    /// Weight the layer applies, with or without an adapter.
    pub fn effective_weight(&self) -> Matrix<T> {
        self.merge().unwrap_or_else(|_| self.base.weight.clone())
    }
}

/// Frobenius-optimal symmetric matrix of rank at most `r` approximating
/// `target`: truncate the eigendecomposition of `(T + Tᵀ)/2` to its `r`
/// largest-magnitude eigenvalues.
pub fn best_symmetric_rank_r_approximation<T: Scalar>(target: &Matrix<T>, r: usize) -> Result<Matrix<T>> {
    if !target.is_square() {
        return Err(Error::NonSquare {
            name: "approximation target".into(),
            rows: target.rows(),
            cols: target.cols(),
        });
    }
    let n = target.rows();
    check_rank(r, n)?;
    let eigen = symmetric_eigen(target)?;
    let order = eigen.order_by_magnitude();
    let mut out = Matrix::zeros(n, n);
    for &k in order.iter().take(r) {
        let value = eigen.values[k];
        for i in 0..n {
            let vi = eigen.vectors[(i, k)] * value;
            for j in 0..n {
                out[(i, j)] += vi * eigen.vectors[(j, k)];
            }
        }
    }
    Ok(out)
}

/// `||target - best_symmetric_rank_r_approximation(target, r)||_F`.
pub fn symmetric_rank_r_residual<T: Scalar>(target: &Matrix<T>, r: usize) -> Result<T> {
    let approx = best_symmetric_rank_r_approximation(target, r)?;
    Ok(target.sub(&approx)?.frobenius_norm())
}

#[cfg(test)]
mod tests {
    use super::*;

    type M = Matrix<f64>;

    fn square_base(n: usize, seed: u64) -> BaseLinear<f64> {
        BaseLinear::new(gaussian_matrix(n, n, 0.3, &mut SeededRng::new(seed)), 0, "layer0.attention.query")
    }

    #[test]
    fn lora_init_is_zero_update() {
        for (n, m, r) in [(4, 6, 2), (8, 8, 8), (5, 3, 1)] {
            let a = init_lora::<f64>(n, m, r, 8.0, DEFAULT_INIT_STD, &mut SeededRng::new(1)).unwrap();
            assert_eq!(a.delta_weight(), M::zeros(n, m));
            assert_eq!(a.b(), &M::zeros(n, r));
        }
        let a = init_lora::<f64>(6, 6, 3, 3.0, 0.02, &mut SeededRng::new(4)).unwrap();
        let b = init_lora::<f64>(6, 6, 3, 3.0, 0.02, &mut SeededRng::new(4)).unwrap();
        assert_eq!(a.a(), b.a());
    }

    #[test]
    fn rank_out_of_range() {
        assert!(matches!(
            init_lora::<f64>(4, 3, 4, 1.0, 0.02, &mut SeededRng::new(0)),
            Err(Error::RankOutOfRange { rank: 4, max: 3 })
        ));
        assert!(init_symlora::<f64>(5, 6, 1.0, 0.02, &mut SeededRng::new(0)).is_err());
        assert!(init_symlora::<f64>(5, 0, 1.0, 0.02, &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn symlora_init_matches_base() {
        let base = square_base(6, 3);
        let adapter = init_symlora::<f64>(6, 2, 2.0, 0.02, &mut SeededRng::new(9)).unwrap();
        assert_eq!(adapter.delta_weight(), M::zeros(6, 6));
        let layer = AdaptedLinear::with_adapter(base.clone(), Adapter::SymLora(adapter)).unwrap();
        let x = gaussian_matrix(6, 3, 1.0, &mut SeededRng::new(2));
        let h = layer.forward(&x).unwrap();
        let h0 = base.weight().matmul(&x).unwrap();
        assert!(h.max_abs_diff(&h0).unwrap() <= 1e-12);
    }

    #[test]
    fn symlora_delta_hand_examples() {
        let q = M::from_rows(&[[1.0], [0.0]]);
        let a = SymLoraAdapter::from_factors(q.clone(), &[2.0], 1.0, 1.0, 0.02).unwrap();
        assert_eq!(a.delta_weight(), M::from_rows(&[[2.0, 0.0], [0.0, 0.0]]));
        let a = SymLoraAdapter::from_factors(q, &[2.0], 1.0, 4.0, 0.02).unwrap();
        assert_eq!(a.delta_weight(), M::from_rows(&[[8.0, 0.0], [0.0, 0.0]]));
    }

    #[test]
    fn lambda_scales_base_term() {
        let base = square_base(4, 7);
        let x = gaussian_matrix(4, 2, 1.0, &mut SeededRng::new(8));
        let w0x = base.weight().matmul(&x).unwrap();
        let q = gaussian_matrix(4, 2, 1.0, &mut SeededRng::new(1));
        for (lambda, expected) in [(0.0, M::zeros(4, 2)), (2.0, w0x.scale(2.0))] {
            let a = SymLoraAdapter::from_factors(q.clone(), &[0.0, 0.0], lambda, 2.0, 0.02).unwrap();
            let layer = AdaptedLinear::with_adapter(base.clone(), Adapter::SymLora(a)).unwrap();
            assert_eq!(layer.forward(&x).unwrap(), expected);
        }
    }

    #[test]
    fn symlora_rejects_non_square_base() {
        let base = BaseLinear::new(M::zeros(3, 4), 0, "w");
        let a = init_symlora::<f64>(3, 1, 1.0, 0.02, &mut SeededRng::new(0)).unwrap();
        assert!(matches!(
            AdaptedLinear::with_adapter(base, Adapter::SymLora(a)),
            Err(Error::NonSquare { .. })
        ));
    }

    #[test]
    fn forward_shape_mismatch() {
        let layer = AdaptedLinear::new(square_base(4, 0));
        assert!(layer.forward(&M::zeros(3, 1)).is_err());
    }

    #[test]
    fn merge_at_init_is_exactly_base() {
        let base = square_base(5, 2);
        let s = init_symlora::<f64>(5, 2, 2.0, 0.02, &mut SeededRng::new(3)).unwrap();
        let l = init_lora::<f64>(5, 5, 2, 2.0, 0.02, &mut SeededRng::new(3)).unwrap();
        for adapter in [Adapter::SymLora(s), Adapter::Lora(l)] {
            let layer = AdaptedLinear::with_adapter(base.clone(), adapter).unwrap();
            assert_eq!(&layer.merge().unwrap(), base.weight());
        }
        assert!(AdaptedLinear::new(base).merge().is_err());
    }

    #[test]
    fn parameter_counts() {
        let mut rng = SeededRng::new(0);
        let lora = Adapter::Lora(init_lora::<f64>(768, 768, 8, 8.0, 0.02, &mut rng).unwrap());
        let sym = Adapter::SymLora(init_symlora::<f64>(768, 8, 8.0, 0.02, &mut rng).unwrap());
        assert_eq!(param_count(&lora, false), 12288);
        assert_eq!(param_count(&lora, true), 12288);
        assert_eq!(param_count(&sym, false), 6152);
        assert_eq!(param_count(&sym, true), 6153);
    }

    #[test]
    fn tape_forward_matches_direct_forward_bitwise() {
        let base = square_base(6, 11);
        let mut rng = SeededRng::new(12);
        let q = gaussian_matrix(6, 3, 1.0, &mut rng);
        let sym = SymLoraAdapter::from_factors(q, &[0.5, -1.0, 2.0], 1.3, 3.0, 0.02).unwrap();
        let b = gaussian_matrix(6, 2, 1.0, &mut rng);
        let a = gaussian_matrix(2, 6, 1.0, &mut rng);
        let lora = LoraAdapter::from_factors(b, a, 2.0, 0.02).unwrap();
        let x = gaussian_matrix(6, 4, 1.0, &mut rng);
        for adapter in [Adapter::SymLora(sym), Adapter::Lora(lora)] {
            let layer = AdaptedLinear::with_adapter(base.clone(), adapter).unwrap();
            let mut tape = Tape::new();
            let xn = tape.constant(x.clone());
            let out = layer.forward_tape(&mut tape, xn, false, None).unwrap();
            assert_eq!(tape.value(out), &layer.forward(&x).unwrap());
        }
    }

    #[test]
    fn best_symmetric_oracle_edge_cases() {
        let v = M::column(&[1.0, -2.0, 0.5]);
        let sym_rank1 = v.matmul_nt(&v).unwrap().scale(3.0);
        let approx = best_symmetric_rank_r_approximation(&sym_rank1, 1).unwrap();
        assert!(approx.max_abs_diff(&sym_rank1).unwrap() < 1e-13);

        let anti = M::from_rows(&[[0.0, 1.0, -2.0], [-1.0, 0.0, 3.0], [2.0, -3.0, 0.0]]);
        for r in 1..=3 {
            let approx = best_symmetric_rank_r_approximation(&anti, r).unwrap();
            assert!(approx.max_abs() < 1e-15);
            let res = symmetric_rank_r_residual(&anti, r).unwrap();
            assert!((res - anti.frobenius_norm()).abs() < 1e-14);
        }
    }
}
