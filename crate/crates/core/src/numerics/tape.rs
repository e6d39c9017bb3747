//! Define-by-run reverse-mode automatic differentiation over matrices.
//!
//! A [`Tape`] is built fresh for every forward pass. Leaves are registered
//! either as trainable parameters (keyed by [`ParamId`]) or as frozen
//! constants; [`Tape::backward`] returns gradients only for the trainable
//! ones. Node indices are assigned in creation order, which is a topological
//! order, so the backward sweep simply walks the node list in reverse.

use std::collections::BTreeMap;
use std::fmt;

use super::matrix::Matrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Name of a trainable tensor, e.g. `layer0.attention.query.sym_q`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub String);

impl ParamId {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ParamId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

/// Named tensors, ordered by name.
pub type ParamSet<T> = BTreeMap<ParamId, Matrix<T>>;

/// Gradient per trainable parameter; each entry has its parameter's shape.
pub type GradientMap<T> = BTreeMap<ParamId, Matrix<T>>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

/// Smooth elementwise functions available to [`Tape::map`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Tanh,
    /// tanh approximation of GELU.
    Gelu,
    Square,
    Sigmoid,
    Sin,
}

impl Elementwise {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Self::Tanh => x.tanh(),
            Self::Gelu => {
                let c = T::lit(0.797_884_560_802_865_4);
                let inner = c * (x + T::lit(0.044715) * x * x * x);
                T::lit(0.5) * x * (T::one() + inner.tanh())
            }
            Self::Square => x * x,
            Self::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Self::Sin => x.sin(),
        }
    }

    fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Self::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            Self::Gelu => {
                let c = T::lit(0.797_884_560_802_865_4);
                let k = T::lit(0.044715);
                let inner = c * (x + k * x * x * x);
                let t = inner.tanh();
                let dinner = c * (T::one() + T::lit(3.0) * k * x * x);
                T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * dinner
            }
            Self::Square => T::lit(2.0) * x,
            Self::Sigmoid => {
                let s = T::one() / (T::one() + (-x).exp());
                s * (T::one() - s)
            }
            Self::Sin => x.cos(),
        }
    }
}

/// Whether a leaf participates in gradient computation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainability {
    Trainable,
    Frozen,
}

impl Trainability {
    pub fn from_flag(trainable: bool) -> Self {
        if trainable {
            Self::Trainable
        } else {
            Self::Frozen
        }
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `aᵀ b`
    MatMulTn(NodeId, NodeId),
    /// `a bᵀ`
    MatMulNt(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, T),
    /// `s * a` with `s` a 1x1 node.
    ScaleBy(NodeId, NodeId),
    /// Row `i` of `a` multiplied by `v[i]`, `v` a column.
    ScaleRows(NodeId, NodeId),
    /// Column `bias` added to every column of `a`.
    AddColumn(NodeId, NodeId),
    Map(NodeId, Elementwise),
    Sum(NodeId),
    MeanCols(NodeId),
    RowsSlice(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    GatherCols(NodeId, Vec<usize>),
    /// Normalizes each column to zero mean and unit variance.
    LayerNormCols(NodeId, T),
    /// Softmax along each row.
    SoftmaxRows(NodeId),
    /// Mean cross-entropy of column-wise logits against class labels.
    CrossEntropyCols(NodeId, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation record for one forward pass. Confined to a single thread.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(ParamId, NodeId)>,
    frozen: Vec<(ParamId, NodeId)>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            frozen: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        &self.nodes[id.0].value
    }

    /// Convenience for 1x1 nodes.
    pub fn scalar_value(&self, id: NodeId) -> Option<T> {
        self.value(id).to_scalar()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Names of trainable leaves, in registration order.
    pub fn trainable_params(&self) -> impl Iterator<Item = &ParamId> {
        self.params.iter().map(|(p, _)| p)
    }

    /// Names of frozen leaves, in registration order.
    pub fn frozen_params(&self) -> impl Iterator<Item = &ParamId> {
        self.frozen.iter().map(|(p, _)| p)
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Registers a named leaf.
    pub fn leaf(&mut self, id: ParamId, value: Matrix<T>, trainability: Trainability) -> NodeId {
        let trainable = trainability == Trainability::Trainable;
        let node = self.push(value, Op::Leaf, trainable);
        if trainable {
            self.params.push((id, node));
        } else {
            self.frozen.push((id, node));
        }
        node
    }

    pub fn param(&mut self, id: impl Into<ParamId>, value: Matrix<T>) -> NodeId {
        self.leaf(id.into(), value, Trainability::Trainable)
    }

    /// Unnamed frozen input (data, targets, masks).
    pub fn constant(&mut self, value: Matrix<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), g))
    }

    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_tn(self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::MatMulTn(a, b), g))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::MatMulNt(a, b), g))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        let g = self.any_grad(&[a]);
        self.push(v, Op::Transpose(a), g)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), g))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Hadamard(a, b), g))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.value(a).scale(s);
        let g = self.any_grad(&[a]);
        self.push(v, Op::Scale(a, s), g)
    }

    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = self.value(s);
        let Some(factor) = sv.to_scalar() else {
            return Err(shape_err("scale_by", sv, self.value(a)));
        };
        let v = self.value(a).scale(factor);
        let g = self.any_grad(&[a, s]);
        Ok(self.push(v, Op::ScaleBy(a, s), g))
    }

    pub fn scale_rows(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (av, vv) = (self.value(a), self.value(v));
        if vv.cols() != 1 || vv.rows() != av.rows() {
            return Err(shape_err("scale_rows", av, vv));
        }
        let mut out = av.clone();
        for i in 0..out.rows() {
            let f = vv[(i, 0)];
            out.row_mut(i).iter_mut().for_each(|x| *x *= f);
        }
        let g = self.any_grad(&[a, v]);
        Ok(self.push(out, Op::ScaleRows(a, v), g))
    }

    pub fn add_column(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.cols() != 1 || bv.rows() != av.rows() {
            return Err(shape_err("add_column", av, bv));
        }
        let mut out = av.clone();
        for i in 0..out.rows() {
            let b = bv[(i, 0)];
            out.row_mut(i).iter_mut().for_each(|x| *x += b);
        }
        let g = self.any_grad(&[a, bias]);
        Ok(self.push(out, Op::AddColumn(a, bias), g))
    }

    pub fn map(&mut self, a: NodeId, f: Elementwise) -> NodeId {
        let v = self.value(a).map(|x| f.apply(x));
        let g = self.any_grad(&[a]);
        self.push(v, Op::Map(a, f), g)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::scalar(self.value(a).sum());
        let g = self.any_grad(&[a]);
        self.push(v, Op::Sum(a), g)
    }

    /// Mean over columns: `rows x cols -> rows x 1`.
    pub fn mean_cols(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let inv = T::one() / T::from_count(av.cols());
        let v = Matrix::from_fn(av.rows(), 1, |i, _| av.row(i).iter().copied().sum::<T>() * inv);
        let g = self.any_grad(&[a]);
        self.push(v, Op::MeanCols(a), g)
    }

    pub fn rows_slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let av = self.value(a);
        if start + len > av.rows() {
            return Err(Error::ShapeMismatch {
                op: "rows_slice",
                left_rows: av.rows(),
                left_cols: av.cols(),
                right_rows: start + len,
                right_cols: av.cols(),
            });
        }
        let v = av.rows_slice(start, len);
        let g = self.any_grad(&[a]);
        Ok(self.push(v, Op::RowsSlice(a, start), g))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(shape_err("concat_rows", self.value(parts[0]), pv));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.as_slice());
        }
        let v = Matrix::from_vec(rows, cols, data)?;
        let g = self.any_grad(parts);
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), g))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]), pv));
            }
            total += pv.cols();
        }
        let mut out = Matrix::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            for i in 0..rows {
                out.row_mut(i)[offset..offset + pv.cols()].copy_from_slice(pv.row(i));
            }
            offset += pv.cols();
        }
        let g = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), g))
    }

    /// Column lookup, e.g. embedding rows for token ids.
    pub fn gather_cols(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let av = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&j| j >= av.cols()) {
            return Err(Error::ShapeMismatch {
                op: "gather_cols",
                left_rows: av.rows(),
                left_cols: av.cols(),
                right_rows: 1,
                right_cols: bad + 1,
            });
        }
        let v = Matrix::from_fn(av.rows(), indices.len(), |i, j| av[(i, indices[j])]);
        let g = self.any_grad(&[a]);
        Ok(self.push(v, Op::GatherCols(a, indices.to_vec()), g))
    }

    pub fn layer_norm_cols(&mut self, a: NodeId, eps: T) -> NodeId {
        let av = self.value(a);
        let (rows, cols) = av.shape();
        let mut out = Matrix::zeros(rows, cols);
        for j in 0..cols {
            let (mean, inv) = column_stats(av, j, eps);
            for i in 0..rows {
                out[(i, j)] = (av[(i, j)] - mean) * inv;
            }
        }
        let g = self.any_grad(&[a]);
        self.push(out, Op::LayerNormCols(a, eps), g)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            softmax_in_place(out.row_mut(i));
        }
        let g = self.any_grad(&[a]);
        self.push(out, Op::SoftmaxRows(a), g)
    }

    /// Mean cross-entropy; `logits` is `classes x batch`.
    pub fn cross_entropy_cols(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        if labels.len() != lv.cols() || labels.iter().any(|&l| l >= lv.rows()) {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_cols",
                left_rows: lv.rows(),
                left_cols: lv.cols(),
                right_rows: labels.iter().copied().max().map_or(0, |m| m + 1),
                right_cols: labels.len(),
            });
        }
        let mut total = T::zero();
        for (j, &label) in labels.iter().enumerate() {
            let col = lv.col_to_vec(j);
            total += log_sum_exp(&col) - col[label];
        }
        let v = Matrix::scalar(total / T::from_count(labels.len()));
        let g = self.any_grad(&[logits]);
        Ok(self.push(v, Op::CrossEntropyCols(logits, labels.to_vec()), g))
    }

    /// Mean of squared entries of `a - b`.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let sq = self.map(d, Elementwise::Square);
        let s = self.sum(sq);
        let n = self.value(a).len();
        Ok(self.scale(s, T::one() / T::from_count(n)))
    }

    /// Gradients of the 1x1 node `loss` with respect to every trainable
    /// leaf. Frozen leaves never appear in the result.
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap<T>> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::NonScalarLoss {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
        }

        let mut out = GradientMap::new();
        for (id, node) in &self.params {
            if node.0 > loss.0 {
                continue;
            }
            let shape = self.value(*node).shape();
            let g = grads[node.0]
                .take()
                .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1));
            match out.get_mut(id) {
                Some(existing) => existing.axpy(T::one(), &g)?,
                None => {
                    out.insert(id.clone(), g);
                }
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Matrix<T>>], id: NodeId, delta: Matrix<T>) -> Result<()> {
        if !self.nodes[id.0].requires_grad {
            return Ok(());
        }
        match &mut grads[id.0] {
            Some(existing) => existing.axpy(T::one(), &delta)?,
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    fn propagate(
        &self,
        op: &Op<T>,
        out: &Matrix<T>,
        g: &Matrix<T>,
        grads: &mut [Option<Matrix<T>>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(self.value(*b))?)?;
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, self.value(*a).matmul_tn(g)?)?;
                }
            }
            Op::MatMulTn(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, self.value(*b).matmul_nt(g)?)?;
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, self.value(*a).matmul(g)?)?;
                }
            }
            Op::MatMulNt(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.matmul(self.value(*b))?)?;
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.matmul_tn(self.value(*a))?)?;
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose())?,
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-T::one()))?;
            }
            Op::Hadamard(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.hadamard(self.value(*b))?)?;
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.hadamard(self.value(*a))?)?;
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s))?,
            Op::ScaleBy(a, s) => {
                let factor = self.value(*s)[(0, 0)];
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.scale(factor))?;
                }
                if self.requires_grad(*s) {
                    let ds = g.hadamard(self.value(*a))?.sum();
                    self.accumulate(grads, *s, Matrix::scalar(ds))?;
                }
            }
            Op::ScaleRows(a, v) => {
                let av = self.value(*a);
                let vv = self.value(*v);
                if self.requires_grad(*a) {
                    let mut da = g.clone();
                    for i in 0..da.rows() {
                        let f = vv[(i, 0)];
                        da.row_mut(i).iter_mut().for_each(|x| *x *= f);
                    }
                    self.accumulate(grads, *a, da)?;
                }
                if self.requires_grad(*v) {
                    let dv = Matrix::from_fn(vv.rows(), 1, |i, _| {
                        g.row(i).iter().zip(av.row(i)).map(|(&x, &y)| x * y).sum()
                    });
                    self.accumulate(grads, *v, dv)?;
                }
            }
            Op::AddColumn(a, bias) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.requires_grad(*bias) {
                    let db = Matrix::from_fn(g.rows(), 1, |i, _| g.row(i).iter().copied().sum());
                    self.accumulate(grads, *bias, db)?;
                }
            }
            Op::Map(a, f) => {
                let av = self.value(*a);
                let da = g.zip_with(av, "map_backward", |gi, x| gi * f.derivative(x))?;
                self.accumulate(grads, *a, da)?;
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(grads, *a, Matrix::filled(r, c, g[(0, 0)]))?;
            }
            Op::MeanCols(a) => {
                let (r, c) = self.value(*a).shape();
                let inv = T::one() / T::from_count(c);
                self.accumulate(grads, *a, Matrix::from_fn(r, c, |i, _| g[(i, 0)] * inv))?;
            }
            Op::RowsSlice(a, start) => {
                let (r, c) = self.value(*a).shape();
                let mut da = Matrix::zeros(r, c);
                for i in 0..g.rows() {
                    da.row_mut(start + i).copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, da)?;
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    if self.requires_grad(*p) {
                        self.accumulate(grads, *p, g.rows_slice(offset, rows))?;
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let cols = self.value(*p).cols();
                    if self.requires_grad(*p) {
                        let dp = Matrix::from_fn(g.rows(), cols, |i, j| g[(i, offset + j)]);
                        self.accumulate(grads, *p, dp)?;
                    }
                    offset += cols;
                }
            }
            Op::GatherCols(a, indices) => {
                let (r, c) = self.value(*a).shape();
                let mut da = Matrix::zeros(r, c);
                for (j, &src) in indices.iter().enumerate() {
                    for i in 0..r {
                        da[(i, src)] += g[(i, j)];
                    }
                }
                self.accumulate(grads, *a, da)?;
            }
            Op::LayerNormCols(a, eps) => {
                let av = self.value(*a);
                let (rows, cols) = av.shape();
                let n = T::from_count(rows);
                let mut da = Matrix::zeros(rows, cols);
                for j in 0..cols {
                    let (_, inv) = column_stats(av, j, *eps);
                    let mut mean_g = T::zero();
                    let mut mean_gy = T::zero();
                    for i in 0..rows {
                        mean_g += g[(i, j)];
                        mean_gy += g[(i, j)] * out[(i, j)];
                    }
                    mean_g /= n;
                    mean_gy /= n;
                    for i in 0..rows {
                        da[(i, j)] = inv * (g[(i, j)] - mean_g - out[(i, j)] * mean_gy);
                    }
                }
                self.accumulate(grads, *a, da)?;
            }
            Op::SoftmaxRows(a) => {
                let mut da = Matrix::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let y = out.row(i);
                    let gr = g.row(i);
                    let inner: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for (d, (&yi, &gi)) in da.row_mut(i).iter_mut().zip(y.iter().zip(gr)) {
                        *d = yi * (gi - inner);
                    }
                }
                self.accumulate(grads, *a, da)?;
            }
            Op::CrossEntropyCols(logits, labels) => {
                let lv = self.value(*logits);
                let scale = g[(0, 0)] / T::from_count(labels.len());
                let mut dl = Matrix::zeros(lv.rows(), lv.cols());
                for (j, &label) in labels.iter().enumerate() {
                    let mut col = lv.col_to_vec(j);
                    softmax_in_place(&mut col);
                    for (i, p) in col.into_iter().enumerate() {
                        let target = if i == label { T::one() } else { T::zero() };
                        dl[(i, j)] = (p - target) * scale;
                    }
                }
                self.accumulate(grads, *logits, dl)?;
            }
        }
        Ok(())
    }
}

fn shape_err<T: Scalar>(op: &'static str, a: &Matrix<T>, b: &Matrix<T>) -> Error {
    Error::ShapeMismatch {
        op,
        left_rows: a.rows(),
        left_cols: a.cols(),
        right_rows: b.rows(),
        right_cols: b.cols(),
    }
}

fn column_stats<T: Scalar>(a: &Matrix<T>, j: usize, eps: T) -> (T, T) {
    let rows = a.rows();
    let n = T::from_count(rows);
    let mean = (0..rows).map(|i| a[(i, j)]).sum::<T>() / n;
    let var = (0..rows).map(|i| (a[(i, j)] - mean).powi(2)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

pub(crate) fn softmax_in_place<T: Scalar>(xs: &mut [T]) {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    max + xs.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    type M = Matrix<f64>;

    #[test]
    fn linear_sum_gradient() {
        let mut tape = Tape::new();
        let w = tape.param("w", M::from_rows(&[[0.3, -1.0], [2.0, 0.5]]));
        let x = tape.constant(M::column(&[1.0, 1.0]));
        let y = tape.matmul(w, x).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads[&ParamId::from("w")], M::filled(2, 2, 1.0));
    }

    #[test]
    fn squared_frobenius_gradient_is_twice_w() {
        let w0 = M::from_rows(&[[1.0, -2.0], [0.5, 3.0]]);
        let mut tape = Tape::new();
        let w = tape.param("w", w0.clone());
        let sq = tape.map(w, Elementwise::Square);
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads[&ParamId::from("w")], w0.scale(2.0));
    }

    #[test]
    fn frozen_only_graph_yields_empty_map() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf("w".into(), M::identity(2), Trainability::Frozen);
        let x = tape.constant(M::column(&[1.0, 2.0]));
        let y = tape.matmul(w, x).unwrap();
        let loss = tape.sum(y);
        assert!(tape.backward(loss).unwrap().is_empty());
        assert_eq!(tape.frozen_params().count(), 1);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param("w", M::identity(2));
        assert!(matches!(
            tape.backward(w),
            Err(Error::NonScalarLoss { rows: 2, cols: 2 })
        ));
    }

    #[test]
    fn frozen_leaf_mixed_with_trainable_gets_no_entry() {
        let mut tape = Tape::new();
        let w = tape.param("w", M::identity(2));
        let f = tape.leaf("base".into(), M::filled(2, 2, 3.0), Trainability::Frozen);
        let y = tape.hadamard(w, f).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[&ParamId::from("w")], M::filled(2, 2, 3.0));
    }

    #[test]
    fn parameter_registered_twice_accumulates() {
        let mut tape = Tape::new();
        let a = tape.param("p", M::scalar(2.0));
        let b = tape.param("p", M::scalar(2.0));
        let y = tape.hadamard(a, b).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads[&ParamId::from("p")], M::scalar(4.0));
    }

    #[test]
    fn cross_entropy_matches_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let z = tape.param("z", M::zeros(4, 3));
        let loss = tape.cross_entropy_cols(z, &[0, 1, 3]).unwrap();
        assert!((tape.scalar_value(loss).unwrap() - 4f64.ln()).abs() < 1e-15);
    }
}
