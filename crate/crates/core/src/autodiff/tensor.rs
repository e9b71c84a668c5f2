//! Dense tensors that record the operations producing them, and the reverse pass over that record.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any graph; results are plain constants.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Reduction applied over the selected positions of a per-token loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

pub(crate) enum Op<S: Scalar> {
    MatMul { a: Tensor<S>, b: Tensor<S>, trans_b: bool },
    Add(Tensor<S>, Tensor<S>),
    Sub(Tensor<S>, Tensor<S>),
    Mul(Tensor<S>, Tensor<S>),
    Scale(Tensor<S>, S),
    AddRow { a: Tensor<S>, bias: Tensor<S> },
    ConcatRows(Vec<Tensor<S>>),
    ConcatCols(Vec<Tensor<S>>),
    SliceRows { a: Tensor<S>, start: usize },
    SliceCols { a: Tensor<S>, start: usize },
    Gather { table: Tensor<S>, ids: Vec<usize> },
    Softmax(Tensor<S>),
    LogSoftmax(Tensor<S>),
    LayerNorm { x: Tensor<S>, gain: Tensor<S>, bias: Tensor<S>, xhat: Vec<S>, rstd: Vec<S> },
    Gelu(Tensor<S>),
    Relu(Tensor<S>),
    Transpose(Tensor<S>),
    Sum(Tensor<S>),
    Mean(Tensor<S>),
    CrossEntropy { logits: Tensor<S>, targets: Vec<usize>, weights: Vec<S>, probs: Vec<S> },
    L2Sq(Tensor<S>, Tensor<S>),
    NormalizeRows { a: Tensor<S>, norms: Vec<S> },
}

impl<S: Scalar> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow { .. } => "add_row",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Gather { .. } => "gather",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Relu(_) => "relu",
            Op::Transpose(_) => "transpose",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::L2Sq(..) => "l2_sq",
            Op::NormalizeRows { .. } => "normalize_rows",
        }
    }

    fn parents(&self) -> Vec<&Tensor<S>> {
        match self {
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::L2Sq(a, b) => {
                vec![a, b]
            }
            Op::AddRow { a, bias } => vec![a, bias],
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.iter().collect(),
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::Gather { table, .. } => vec![table],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::Scale(a, _)
            | Op::SliceRows { a, .. }
            | Op::SliceCols { a, .. }
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Gelu(a)
            | Op::Relu(a)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::NormalizeRows { a, .. } => vec![a],
        }
    }
}

struct Inner<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<S>>>,
    op: Option<Op<S>>,
}

/// Reference-counted handle to an immutable dense tensor.
///
/// Leaves created with [`Tensor::param`] accumulate gradients across calls to
/// [`Tensor::backward`]; intermediate tensors keep their producing op so the
/// reverse pass can walk back to the leaves.
pub struct Tensor<S: Scalar>(Rc<Inner<S>>);

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("op", &self.0.op.as_ref().map(|o| o.name()))
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    fn build(shape: Vec<usize>, data: Vec<S>, requires_grad: bool, op: Option<Op<S>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Inner {
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            op,
        }))
    }

    /// Result of an op: records the op only when some parent is differentiable.
    fn from_op(shape: Vec<usize>, data: Vec<S>, op: Op<S>) -> Self {
        let tracked = grad_enabled() && op.parents().iter().any(|p| p.requires_grad());
        if tracked {
            Self::build(shape, data, true, Some(op))
        } else {
            Self::build(shape, data, false, None)
        }
    }

    /// Trainable leaf.
    pub fn param(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        Self::check_len(&shape, data.len())?;
        Ok(Self::build(shape, data, true, None))
    }

    /// Non-differentiable leaf.
    pub fn constant(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        Self::check_len(&shape, data.len())?;
        Ok(Self::build(shape, data, false, None))
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self::build(shape, vec![S::zero(); n], false, None)
    }

    pub fn scalar(v: S) -> Self {
        Self::build(Vec::new(), vec![v], false, None)
    }

    fn check_len(shape: &[usize], len: usize) -> Result<()> {
        if numel(shape) != len {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {} values, got {len}", numel(shape)),
            ));
        }
        Ok(())
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[S] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.0.data.clone()
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// Name of the producing op, if this tensor is an interior graph node.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.op.as_ref().map(|o| o.name())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        self.0.data[0]
    }

    pub fn rows(&self) -> usize {
        match self.0.shape.len() {
            2 => self.0.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.0.shape.len() {
            0 => 1,
            1 => self.0.shape[0],
            _ => self.0.shape[1],
        }
    }

    pub fn row(&self, r: usize) -> &[S] {
        let c = self.cols();
        &self.0.data[r * c..(r + 1) * c]
    }

    /// Accumulated gradient of a leaf.
    pub fn grad(&self) -> Option<Ref<'_, Option<Vec<S>>>> {
        let g = self.0.grad.borrow();
        if g.is_some() {
            Some(g)
        } else {
            None
        }
    }

    /// Accumulated gradient, or zeros when nothing reached this leaf.
    pub fn grad_or_zero(&self) -> Vec<S> {
        self.0
            .grad
            .borrow()
            .clone()
            .unwrap_or_else(|| vec![S::zero(); self.len()])
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, detached from any graph and not trainable.
    pub fn detach(&self) -> Self {
        Self::build(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    fn expect_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.0.shape.len() != 2 {
            return Err(Error::shape(op, format!("expected a matrix, got {:?}", self.0.shape)));
        }
        Ok((self.0.shape[0], self.0.shape[1]))
    }

    fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.0.shape != other.0.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.0.shape, other.0.shape)));
        }
        Ok(())
    }

    // ---------------------------------------------------------------- ops

    /// `self · other`, both matrices.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.matmul_impl(other, false)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(&self, other: &Self, trans_b: bool) -> Result<Self> {
        let op = if trans_b { "matmul_t" } else { "matmul" };
        let (m, k) = self.expect_2d(op)?;
        let (br, bc) = other.expect_2d(op)?;
        let (kb, n, bs) = if trans_b { (bc, br, (1, bc as isize)) } else { (br, bc, (bc as isize, 1)) };
        if k != kb {
            return Err(Error::shape(op, format!("{:?} x {:?}", self.shape(), other.shape())));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            S::one(),
            self.data(),
            (k as isize, 1),
            other.data(),
            bs,
            S::zero(),
            &mut out,
            (n as isize, 1),
        );
        Ok(Self::from_op(
            vec![m, n],
            out,
            Op::MatMul {
                a: self.clone(),
                b: other.clone(),
                trans_b,
            },
        ))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.expect_same_shape(other, "add")?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a + b).collect();
        Ok(Self::from_op(self.0.shape.clone(), data, Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.expect_same_shape(other, "sub")?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a - b).collect();
        Ok(Self::from_op(self.0.shape.clone(), data, Op::Sub(self.clone(), other.clone())))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.expect_same_shape(other, "mul")?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        Ok(Self::from_op(self.0.shape.clone(), data, Op::Mul(self.clone(), other.clone())))
    }

    pub fn scale(&self, c: S) -> Self {
        let data = self.data().iter().map(|&a| a * c).collect();
        Self::from_op(self.0.shape.clone(), data, Op::Scale(self.clone(), c))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&self, bias: &Self) -> Result<Self> {
        let (r, c) = self.expect_2d("add_row")?;
        if bias.len() != c {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", self.shape(), bias.shape())));
        }
        let b = bias.data();
        let mut data = self.to_vec();
        for row in data.chunks_mut(c) {
            for (x, &y) in row.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
        debug_assert_eq!(data.len(), r * c);
        Ok(Self::from_op(
            self.0.shape.clone(),
            data,
            Op::AddRow {
                a: self.clone(),
                bias: bias.clone(),
            },
        ))
    }

    /// Stacks matrices (or row vectors) vertically.
    pub fn concat_rows(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let c = first.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.cols() != c || p.0.shape.len() > 2 {
                return Err(Error::shape("concat_rows", format!("{:?} vs {:?}", first.shape(), p.shape())));
            }
            rows += p.rows();
            data.extend_from_slice(p.data());
        }
        Ok(Self::from_op(vec![rows, c], data, Op::ConcatRows(parts.to_vec())))
    }

    /// Places matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let r = first.expect_2d("concat_cols")?.0;
        let mut total = 0;
        for p in parts {
            let (pr, pc) = p.expect_2d("concat_cols")?;
            if pr != r {
                return Err(Error::shape("concat_cols", format!("{:?} vs {:?}", first.shape(), p.shape())));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Self::from_op(vec![r, total], data, Op::ConcatCols(parts.to_vec())))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let (r, c) = self.expect_2d("slice_rows")?;
        if start > end || end > r {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {:?}", self.shape())));
        }
        let data = self.data()[start * c..end * c].to_vec();
        Ok(Self::from_op(vec![end - start, c], data, Op::SliceRows { a: self.clone(), start }))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        let (r, c) = self.expect_2d("slice_cols")?;
        if start > end || end > c {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {:?}", self.shape())));
        }
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&self.row(i)[start..end]);
        }
        Ok(Self::from_op(vec![r, end - start], data, Op::SliceCols { a: self.clone(), start }))
    }

    /// Selects rows by index; used for embedding lookup and position gathering.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Self> {
        let (r, c) = self.expect_2d("embedding_lookup")?;
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::shape("embedding_lookup", format!("row {id} of {r}")));
            }
            data.extend_from_slice(self.row(id));
        }
        Ok(Self::from_op(
            vec![ids.len(), c],
            data,
            Op::Gather {
                table: self.clone(),
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn embedding_lookup(&self, ids: &[usize]) -> Result<Self> {
        self.gather_rows(ids)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&self) -> Result<Self> {
        let (_, c) = self.expect_2d("softmax")?;
        let mut data = self.to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        Ok(Self::from_op(self.0.shape.clone(), data, Op::Softmax(self.clone())))
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&self) -> Result<Self> {
        let (_, c) = self.expect_2d("log_softmax")?;
        let mut data = self.to_vec();
        for row in data.chunks_mut(c) {
            let lse = log_sum_exp(row);
            for x in row.iter_mut() {
                *x = *x - lse;
            }
        }
        Ok(Self::from_op(self.0.shape.clone(), data, Op::LogSoftmax(self.clone())))
    }

    /// Per-row normalization to zero mean and unit variance, then `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&self, gain: &Self, bias: &Self, eps: f64) -> Result<Self> {
        let (r, c) = self.expect_2d("layer_norm")?;
        if gain.len() != c || bias.len() != c {
            return Err(Error::shape(
                "layer_norm",
                format!("{:?} with gain {:?} bias {:?}", self.shape(), gain.shape(), bias.shape()),
            ));
        }
        let eps = S::from_f64_lossy(eps);
        let n = S::from_usize(c).unwrap();
        let mut xhat = Vec::with_capacity(r * c);
        let mut rstd = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = self.row(i);
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() / n;
            let rs = S::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &x) in row.iter().enumerate() {
                let h = (x - mean) * rs;
                xhat.push(h);
                out.push(h * gain.data()[j] + bias.data()[j]);
            }
        }
        Ok(Self::from_op(
            self.0.shape.clone(),
            out,
            Op::LayerNorm {
                x: self.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                xhat,
                rstd,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Self {
        let data = self.data().iter().map(|&x| gelu(x)).collect();
        Self::from_op(self.0.shape.clone(), data, Op::Gelu(self.clone()))
    }

    pub fn relu(&self) -> Self {
        let data = self.data().iter().map(|&x| x.max(S::zero())).collect();
        Self::from_op(self.0.shape.clone(), data, Op::Relu(self.clone()))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.expect_2d("transpose")?;
        let mut data = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.0.data[i * c + j];
            }
        }
        Ok(Self::from_op(vec![c, r], data, Op::Transpose(self.clone())))
    }

    pub fn sum(&self) -> Self {
        let s = self.data().iter().copied().sum();
        Self::from_op(Vec::new(), vec![s], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Self {
        let n = S::from_usize(self.len().max(1)).unwrap();
        let s = self.data().iter().copied().sum::<S>() / n;
        Self::from_op(Vec::new(), vec![s], Op::Mean(self.clone()))
    }

    /// Negative log-likelihood of `targets` under row-wise softmax of `self` (`T × V`).
    ///
    /// Rows with `mask[t] == false` are ignored; `Mean` divides by the number of kept rows.
    pub fn cross_entropy(&self, targets: &[usize], mask: &[bool], reduction: Reduction) -> Result<Self> {
        let (t, v) = self.expect_2d("cross_entropy")?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?}, {} targets, mask {}", self.shape(), targets.len(), mask.len()),
            ));
        }
        let kept = mask.iter().filter(|&&m| m).count();
        if kept == 0 {
            return Err(Error::Objective("cross_entropy: every position is masked".into()));
        }
        let w = match reduction {
            Reduction::Mean => S::one() / S::from_usize(kept).unwrap(),
            Reduction::Sum => S::one(),
        };
        let mut weights = vec![S::zero(); t];
        let mut probs = vec![S::zero(); t * v];
        let mut total = S::zero();
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            if targets[i] >= v {
                return Err(Error::shape("cross_entropy", format!("target {} outside vocab {v}", targets[i])));
            }
            let row = self.row(i);
            let lse = log_sum_exp(row);
            total = total + w * (lse - row[targets[i]]);
            weights[i] = w;
            for (p, &x) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        Ok(Self::from_op(
            Vec::new(),
            vec![total],
            Op::CrossEntropy {
                logits: self.clone(),
                targets: targets.to_vec(),
                weights,
                probs,
            },
        ))
    }

    /// `Σ (a − b)²`.
    pub fn l2_sq(&self, other: &Self) -> Result<Self> {
        self.expect_same_shape(other, "l2_sq")?;
        let s = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        Ok(Self::from_op(Vec::new(), vec![s], Op::L2Sq(self.clone(), other.clone())))
    }

    /// Scales every row to unit Euclidean norm; a zero row is an error.
    pub fn normalize_rows(&self) -> Result<Self> {
        let (r, c) = self.expect_2d("normalize_rows")?;
        let mut norms = Vec::with_capacity(r);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = self.row(i);
            let n = row.iter().map(|&x| x * x).sum::<S>().sqrt();
            if !(n > S::zero()) || !n.is_finite() {
                return Err(Error::Numeric(format!("normalize_rows: row {i} has norm {n}")));
            }
            norms.push(n);
            data.extend(row.iter().map(|&x| x / n));
        }
        Ok(Self::from_op(
            self.0.shape.clone(),
            data,
            Op::NormalizeRows { a: self.clone(), norms },
        ))
    }

    // ---------------------------------------------------------------- reverse pass

    /// Accumulates `∂self/∂leaf` into every reachable trainable leaf.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::shape("backward", format!("loss must be a scalar, got {:?}", self.shape())));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut store = GradStore::new(&order);
        store.bufs[order.len() - 1] = Some(vec![S::one()]);
        for pos in (0..order.len()).rev() {
            let node = &order[pos];
            let Some(g) = store.bufs[pos].take() else { continue };
            match &node.0.op {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                        None => *slot = Some(g),
                    }
                }
                Some(op) => backprop_op(op, node, &g, &mut store),
            }
        }
        Ok(())
    }

    /// Post-order over the differentiable subgraph; the root comes last.
    fn topo_order(&self) -> Vec<Tensor<S>> {
        let mut order = Vec::new();
        let mut visited: HashMap<*const Inner<S>, ()> = HashMap::new();
        let mut stack: Vec<(Tensor<S>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&t.0);
            if expanded {
                order.push(t);
                continue;
            }
            if visited.contains_key(&key) {
                continue;
            }
            visited.insert(key, ());
            stack.push((t.clone(), true));
            if let Some(op) = &t.0.op {
                for p in op.parents().into_iter().rev() {
                    if p.requires_grad() && !visited.contains_key(&Rc::as_ptr(&p.0)) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

struct GradStore<S: Scalar> {
    index: HashMap<*const Inner<S>, usize>,
    sizes: Vec<usize>,
    bufs: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> GradStore<S> {
    fn new(order: &[Tensor<S>]) -> Self {
        let index = order.iter().enumerate().map(|(i, t)| (Rc::as_ptr(&t.0), i)).collect();
        Self {
            index,
            sizes: order.iter().map(|t| t.len()).collect(),
            bufs: (0..order.len()).map(|_| None).collect(),
        }
    }

    /// Gradient buffer of `t`, allocated on first use; `None` for non-differentiable tensors.
    fn slot(&mut self, t: &Tensor<S>) -> Option<&mut [S]> {
        if !t.requires_grad() {
            return None;
        }
        let i = *self.index.get(&Rc::as_ptr(&t.0))?;
        let n = self.sizes[i];
        Some(self.bufs[i].get_or_insert_with(|| vec![S::zero(); n]).as_mut_slice())
    }
}

fn backprop_op<S: Scalar>(op: &Op<S>, out: &Tensor<S>, g: &[S], store: &mut GradStore<S>) {
    match op {
        Op::MatMul { a, b, trans_b } => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = out.shape()[1];
            if let Some(da) = store.slot(a) {
                // dA = G · op(B)ᵀ
                let bs = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                S::gemm(m, n, k, S::one(), g, (n as isize, 1), b.data(), bs, S::one(), da, (k as isize, 1));
            }
            if let Some(db) = store.slot(b) {
                if *trans_b {
                    // B is n×k: dB = Gᵀ · A
                    S::gemm(n, m, k, S::one(), g, (1, n as isize), a.data(), (k as isize, 1), S::one(), db, (k as isize, 1));
                } else {
                    // B is k×n: dB = Aᵀ · G
                    S::gemm(k, m, n, S::one(), a.data(), (1, k as isize), g, (n as isize, 1), S::one(), db, (n as isize, 1));
                }
            }
        }
        Op::Add(a, b) => {
            accumulate(store, a, g.iter().copied());
            accumulate(store, b, g.iter().copied());
        }
        Op::Sub(a, b) => {
            accumulate(store, a, g.iter().copied());
            accumulate(store, b, g.iter().map(|&x| -x));
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (a.data(), b.data());
            accumulate(store, a, g.iter().zip(bd).map(|(&x, &y)| x * y));
            accumulate(store, b, g.iter().zip(ad).map(|(&x, &y)| x * y));
        }
        Op::Scale(a, c) => accumulate(store, a, g.iter().map(|&x| x * *c)),
        Op::AddRow { a, bias } => {
            accumulate(store, a, g.iter().copied());
            let c = bias.len();
            if let Some(db) = store.slot(bias) {
                for row in g.chunks(c) {
                    db.iter_mut().zip(row).for_each(|(d, &x)| *d = *d + x);
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = p.len();
                accumulate(store, p, g[offset..offset + n].iter().copied());
                offset += n;
            }
        }
        Op::ConcatCols(parts) => {
            let total = out.cols();
            let mut col = 0;
            for p in parts {
                let pc = p.cols();
                if let Some(dp) = store.slot(p) {
                    for (i, drow) in dp.chunks_mut(pc).enumerate() {
                        let src = &g[i * total + col..i * total + col + pc];
                        drow.iter_mut().zip(src).for_each(|(d, &x)| *d = *d + x);
                    }
                }
                col += pc;
            }
        }
        Op::SliceRows { a, start } => {
            let c = a.cols();
            if let Some(da) = store.slot(a) {
                let dst = &mut da[start * c..start * c + g.len()];
                dst.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x);
            }
        }
        Op::SliceCols { a, start } => {
            let c = a.cols();
            let w = out.cols();
            if let Some(da) = store.slot(a) {
                for (i, src) in g.chunks(w).enumerate() {
                    let dst = &mut da[i * c + start..i * c + start + w];
                    dst.iter_mut().zip(src).for_each(|(d, &x)| *d = *d + x);
                }
            }
        }
        Op::Gather { table, ids } => {
            let c = table.cols();
            if let Some(dt) = store.slot(table) {
                for (src, &id) in g.chunks(c).zip(ids) {
                    let dst = &mut dt[id * c..(id + 1) * c];
                    dst.iter_mut().zip(src).for_each(|(d, &x)| *d = *d + x);
                }
            }
        }
        Op::Softmax(a) => {
            let c = a.cols();
            let y = out.data();
            if let Some(da) = store.slot(a) {
                for ((drow, grow), yrow) in da.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let dot: S = grow.iter().zip(yrow).map(|(&x, &p)| x * p).sum();
                    for ((d, &x), &p) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = *d + p * (x - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            let c = a.cols();
            let y = out.data();
            if let Some(da) = store.slot(a) {
                for ((drow, grow), yrow) in da.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let gsum: S = grow.iter().copied().sum();
                    for ((d, &x), &ly) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = *d + x - ly.exp() * gsum;
                    }
                }
            }
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let c = x.cols();
            let n = S::from_usize(c).unwrap();
            let gd = gain.data();
            if let Some(dg) = store.slot(gain) {
                for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                    dg.iter_mut().zip(grow.iter().zip(hrow)).for_each(|(d, (&a, &h))| *d = *d + a * h);
                }
            }
            if let Some(db) = store.slot(bias) {
                for grow in g.chunks(c) {
                    db.iter_mut().zip(grow).for_each(|(d, &a)| *d = *d + a);
                }
            }
            if let Some(dx) = store.slot(x) {
                let mut dxhat = vec![S::zero(); c];
                for (i, drow) in dx.chunks_mut(c).enumerate() {
                    let grow = &g[i * c..(i + 1) * c];
                    let hrow = &xhat[i * c..(i + 1) * c];
                    for j in 0..c {
                        dxhat[j] = grow[j] * gd[j];
                    }
                    let s1: S = dxhat.iter().copied().sum();
                    let s2: S = dxhat.iter().zip(hrow).map(|(&a, &h)| a * h).sum();
                    for j in 0..c {
                        drow[j] = drow[j] + rstd[i] / n * (n * dxhat[j] - s1 - hrow[j] * s2);
                    }
                }
            }
        }
        Op::Gelu(a) => {
            let ad = a.data();
            accumulate(store, a, g.iter().zip(ad).map(|(&x, &v)| x * gelu_grad(v)));
        }
        Op::Relu(a) => {
            let ad = a.data();
            accumulate(
                store,
                a,
                g.iter().zip(ad).map(|(&x, &v)| if v > S::zero() { x } else { S::zero() }),
            );
        }
        Op::Transpose(a) => {
            let (r, c) = (a.shape()[0], a.shape()[1]);
            if let Some(da) = store.slot(a) {
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = da[i * c + j] + g[j * r + i];
                    }
                }
            }
        }
        Op::Sum(a) => {
            let n = a.len();
            accumulate(store, a, std::iter::repeat_n(g[0], n));
        }
        Op::Mean(a) => {
            let n = a.len();
            let v = g[0] / S::from_usize(n.max(1)).unwrap();
            accumulate(store, a, std::iter::repeat_n(v, n));
        }
        Op::CrossEntropy { logits, targets, weights, probs } => {
            let v = logits.cols();
            if let Some(dl) = store.slot(logits) {
                for (i, &w) in weights.iter().enumerate() {
                    if w == S::zero() {
                        continue;
                    }
                    let scale = g[0] * w;
                    let row = &mut dl[i * v..(i + 1) * v];
                    for (d, &p) in row.iter_mut().zip(&probs[i * v..(i + 1) * v]) {
                        *d = *d + scale * p;
                    }
                    row[targets[i]] = row[targets[i]] - scale;
                }
            }
        }
        Op::L2Sq(a, b) => {
            let two = S::from_f64_lossy(2.0) * g[0];
            let (ad, bd) = (a.data(), b.data());
            accumulate(store, a, ad.iter().zip(bd).map(|(&x, &y)| two * (x - y)));
            accumulate(store, b, ad.iter().zip(bd).map(|(&x, &y)| two * (y - x)));
        }
        Op::NormalizeRows { a, norms } => {
            let c = a.cols();
            let y = out.data();
            if let Some(da) = store.slot(a) {
                for (i, drow) in da.chunks_mut(c).enumerate() {
                    let grow = &g[i * c..(i + 1) * c];
                    let yrow = &y[i * c..(i + 1) * c];
                    let dot: S = grow.iter().zip(yrow).map(|(&x, &p)| x * p).sum();
                    for j in 0..c {
                        drow[j] = drow[j] + (grow[j] - yrow[j] * dot) / norms[i];
                    }
                }
            }
        }
    }
}

fn accumulate<S: Scalar>(store: &mut GradStore<S>, t: &Tensor<S>, vals: impl Iterator<Item = S>) {
    if let Some(buf) = store.slot(t) {
        buf.iter_mut().zip(vals).for_each(|(d, x)| *d = *d + x);
    }
}

pub(crate) fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    if max == S::neg_infinity() {
        return max;
    }
    max + row.iter().map(|&x| (x - max).exp()).sum::<S>().ln()
}

fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu<S: Scalar>(x: S) -> S {
    let c = S::from_f64_lossy(GELU_C);
    let k = S::from_f64_lossy(GELU_K);
    let half = S::from_f64_lossy(0.5);
    half * x * (S::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64_lossy(GELU_C);
    let k = S::from_f64_lossy(GELU_K);
    let half = S::from_f64_lossy(0.5);
    let three = S::from_f64_lossy(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * k * x * x)
}
