//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every operation appends a node to a [`Tape`]. Backward rules are written
//! in terms of the same tape operations, so a gradient produced by
//! [`Tape::gradients`] is itself a differentiable node. This is what the
//! gradient penalty needs: the norm of an input gradient is differentiated
//! again with respect to the critic parameters.
//!
//! Node ids increase in creation order, which is a topological order, so the
//! backward sweep simply walks ids downward from the root.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::matrix::Matrix;
use crate::error::{Error, Result, Shape};

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulConst(usize, Rc<Matrix>),
    AddConst(usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    BroadcastRows(usize),
    BroadcastCols(usize),
    RowSum(usize),
    ColSum(usize),
    Sum(usize),
    Recip(usize),
    Sqrt(usize),
    Exp(usize),
    Log { input: usize, floor: f64 },
    LeakyRelu { input: usize, slope: f64 },
    Softmax(usize),
    LogSoftmax(usize),
    PairwiseNegSqDist(usize, usize),
    HConcat(usize, usize),
    SliceCols { input: usize, start: usize },
    PadCols { input: usize, start: usize },
}

struct Node {
    value: Rc<Matrix>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// A tape is single-threaded; independent tapes share nothing.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {})", self.id, self.shape())
    }
}

/// First-order gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Rc<Matrix>>>,
    shapes: Vec<Shape>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`; all zeros when `var` has
    /// no path to the root.
    pub fn get(&self, var: Var<'_>) -> Matrix {
        match self.grads.get(var.id).and_then(|g| g.as_ref()) {
            Some(g) => (**g).clone(),
            None => {
                let Shape(r, c) = self
                    .shapes
                    .get(var.id)
                    .copied()
                    .unwrap_or_else(|| var.shape());
                Matrix::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that gradients flow into.
    pub fn var(&self, value: Matrix) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, false)
    }

    fn push_unchecked(&self, value: Matrix, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, op_name: &'static str, value: Matrix, op: Op) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op_name,
                detail: format!("output of shape {}", value.shape()),
            });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents(&op).iter().any(|&p| nodes[p].requires_grad)
        };
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn value_of(&self, id: usize) -> Rc<Matrix> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Runs the backward sweep from a scalar `root` and returns the
    /// gradients. The tape can be swept this way only once.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        let grads = self.sweep(root)?;
        self.consumed.set(true);
        let nodes = self.nodes.borrow();
        let shapes = nodes.iter().map(|n| n.value.shape()).collect();
        let grads = grads
            .into_iter()
            .map(|g| g.map(|id| Rc::clone(&nodes[id].value)))
            .collect();
        Ok(Gradients { grads, shapes })
    }

    /// Differentiable gradients of scalar `root` with respect to `wrt`.
    ///
    /// The returned nodes live on this tape and can feed further
    /// computation, including another backward pass. Does not consume the
    /// tape.
    pub fn gradients<'t>(&'t self, root: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        let grads = self.sweep(root)?;
        Ok(wrt
            .iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(id) => Var { tape: self, id },
                None => {
                    let Shape(r, c) = w.shape();
                    self.constant(Matrix::zeros(r, c))
                }
            })
            .collect())
    }

    fn sweep(&self, root: Var<'_>) -> Result<Vec<Option<usize>>> {
        debug_assert!(std::ptr::eq(root.tape, self));
        let shape = root.shape();
        if shape != Shape(1, 1) {
            return Err(Error::NonScalarRoot(shape));
        }
        let mut grads: Vec<Option<usize>> = vec![None; root.id + 1];
        if !self.requires_grad(root.id) {
            return Ok(grads);
        }
        grads[root.id] = Some(self.constant(Matrix::scalar(1.0)).id);
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id] else { continue };
            let (op, requires_grad) = {
                let nodes = self.nodes.borrow();
                (nodes[id].op.clone(), nodes[id].requires_grad)
            };
            if !requires_grad {
                continue;
            }
            let g = Var { tape: self, id: g };
            let out = Var { tape: self, id };
            for (parent, contribution) in self.vjp(&op, out, g)? {
                grads[parent] = Some(match grads[parent] {
                    None => contribution.id,
                    Some(existing) => Var { tape: self, id: existing }.add(contribution)?.id,
                });
            }
        }
        Ok(grads)
    }

    /// Contributions of the upstream gradient `g` of node `out` to each
    /// parent that requires a gradient.
    fn vjp<'t>(&'t self, op: &Op, out: Var<'t>, g: Var<'t>) -> Result<Vec<(usize, Var<'t>)>> {
        let v = |id: usize| Var { tape: self, id };
        let wants = |id: usize| self.requires_grad(id);
        let mut acc = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(a) {
                    acc.push((a, g.matmul(v(b).t()?)?));
                }
                if wants(b) {
                    acc.push((b, v(a).t()?.matmul(g)?));
                }
            }
            Op::Transpose(a) => acc.push((a, g.t()?)),
            Op::Add(a, b) => {
                if wants(a) {
                    acc.push((a, g));
                }
                if wants(b) {
                    acc.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    acc.push((a, g));
                }
                if wants(b) {
                    acc.push((b, g.neg()?));
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    acc.push((a, g.mul(v(b))?));
                }
                if wants(b) {
                    acc.push((b, g.mul(v(a))?));
                }
            }
            Op::MulConst(a, ref mask) => acc.push((a, g.mul_const(Rc::clone(mask))?)),
            Op::AddConst(a) => acc.push((a, g)),
            Op::Scale(a, f) => acc.push((a, g.scale(f)?)),
            Op::AddRow(a, b) => {
                if wants(a) {
                    acc.push((a, g));
                }
                if wants(b) {
                    acc.push((b, g.col_sum()?));
                }
            }
            Op::BroadcastRows(a) => acc.push((a, g.col_sum()?)),
            Op::BroadcastCols(a) => acc.push((a, g.row_sum()?)),
            Op::RowSum(a) => acc.push((a, g.broadcast_cols(v(a).shape().1)?)),
            Op::ColSum(a) => acc.push((a, g.broadcast_rows(v(a).shape().0)?)),
            Op::Sum(a) => {
                let Shape(r, c) = v(a).shape();
                acc.push((a, g.broadcast_cols(c)?.broadcast_rows(r)?));
            }
            Op::Recip(a) => acc.push((a, g.mul(out)?.mul(out)?.neg()?)),
            Op::Sqrt(a) => acc.push((a, g.mul(out.recip()?)?.scale(0.5)?)),
            Op::Exp(a) => acc.push((a, g.mul(out)?)),
            Op::Log { input, floor } => {
                let x = self.value_of(input);
                let mask = x.map(|e| if e > floor { 1.0 } else { 0.0 });
                let fill = x.map(|e| if e > floor { 0.0 } else { floor });
                let clamped = v(input).mul_const(Rc::new(mask.clone()))?.add_const(&fill)?;
                let inv = clamped.recip()?.mul_const(Rc::new(mask))?;
                acc.push((input, g.mul(inv)?));
            }
            Op::LeakyRelu { input, slope } => {
                let mask = self
                    .value_of(input)
                    .map(|e| if e > 0.0 { 1.0 } else { slope });
                acc.push((input, g.mul_const(Rc::new(mask))?));
            }
            Op::Softmax(a) => {
                let cols = out.shape().1;
                let inner = g.mul(out)?.row_sum()?.broadcast_cols(cols)?;
                let grad = out.mul(g.sub(inner)?)?;
                acc.push((a, fault::softmax_backward(grad)?));
            }
            Op::LogSoftmax(a) => {
                let cols = out.shape().1;
                let probs = out.exp()?;
                let spread = probs.mul(g.row_sum()?.broadcast_cols(cols)?)?;
                acc.push((a, g.sub(spread)?));
            }
            Op::PairwiseNegSqDist(x, y) => {
                let d = v(x).shape().1;
                if wants(x) {
                    let weighted = g.row_sum()?.broadcast_cols(d)?.mul(v(x))?;
                    acc.push((x, g.matmul(v(y))?.sub(weighted)?.scale(2.0)?));
                }
                if wants(y) {
                    let gt = g.t()?;
                    let weighted = gt.row_sum()?.broadcast_cols(d)?.mul(v(y))?;
                    acc.push((y, gt.matmul(v(x))?.sub(weighted)?.scale(2.0)?));
                }
            }
            Op::HConcat(a, b) => {
                let ca = v(a).shape().1;
                let cb = v(b).shape().1;
                if wants(a) {
                    acc.push((a, g.slice_cols(0, ca)?));
                }
                if wants(b) {
                    acc.push((b, g.slice_cols(ca, cb)?));
                }
            }
            Op::SliceCols { input, start } => {
                let total = v(input).shape().1;
                acc.push((input, g.pad_cols(start, total)?));
            }
            Op::PadCols { input, start } => {
                let len = v(input).shape().1;
                acc.push((input, g.slice_cols(start, len)?));
            }
        }
        Ok(acc)
    }
}

fn parents(op: &Op) -> Vec<usize> {
    match *op {
        Op::Leaf => vec![],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddRow(a, b)
        | Op::PairwiseNegSqDist(a, b)
        | Op::HConcat(a, b) => vec![a, b],
        Op::Transpose(a)
        | Op::MulConst(a, _)
        | Op::AddConst(a)
        | Op::Scale(a, _)
        | Op::BroadcastRows(a)
        | Op::BroadcastCols(a)
        | Op::RowSum(a)
        | Op::ColSum(a)
        | Op::Sum(a)
        | Op::Recip(a)
        | Op::Sqrt(a)
        | Op::Exp(a)
        | Op::Softmax(a)
        | Op::LogSoftmax(a)
        | Op::Log { input: a, .. }
        | Op::LeakyRelu { input: a, .. }
        | Op::SliceCols { input: a, .. }
        | Op::PadCols { input: a, .. } => vec![a],
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Matrix> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Shape {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    /// Top-left entry; the value of a 1x1 node.
    pub fn item(&self) -> f64 {
        self.value().get(0, 0)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn same_shape(self, other: Var<'t>, op: &'static str) -> Result<()> {
        let (l, r) = (self.shape(), other.shape());
        if l != r {
            return Err(Error::dim(op, l, r));
        }
        Ok(())
    }

    fn unary(self, name: &'static str, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let value = self.value().map(f);
        self.tape.push(name, value, op)
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_shape(other, name)?;
        let value = self.value().zip_map(&other.value(), name, f)?;
        self.tape.push(name, value, op)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.value().matmul(&other.value())?;
        self.tape.push("matmul", value, Op::MatMul(self.id, other.id))
    }

    /// Transpose.
    pub fn t(self) -> Result<Var<'t>> {
        let value = self.value().transpose();
        self.tape.push("transpose", value, Op::Transpose(self.id))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(self, mask: Rc<Matrix>) -> Result<Var<'t>> {
        let value = self.value().zip_map(&mask, "mul_const", |a, b| a * b)?;
        self.tape.push("mul_const", value, Op::MulConst(self.id, mask))
    }

    /// Elementwise sum with a constant matrix.
    pub fn add_const(self, offset: &Matrix) -> Result<Var<'t>> {
        let value = self.value().add(offset)?;
        self.tape.push("add_const", value, Op::AddConst(self.id))
    }

    pub fn add_scalar(self, offset: f64) -> Result<Var<'t>> {
        let value = self.value().map(|v| v + offset);
        self.tape.push("add_scalar", value, Op::AddConst(self.id))
    }

    pub fn scale(self, factor: f64) -> Result<Var<'t>> {
        self.unary("scale", Op::Scale(self.id, factor), |v| v * factor)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.mul(self)
    }

    /// Adds a 1xm row to every row of an nxm matrix.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), row.value());
        if b.rows() != 1 || a.cols() != b.cols() {
            return Err(Error::dim("add_row", a.shape(), b.shape()));
        }
        let mut out = (*a).clone();
        for r in 0..out.rows() {
            for (o, v) in out.row_mut(r).iter_mut().zip(b.data()) {
                *o += v;
            }
        }
        self.tape.push("add_row", out, Op::AddRow(self.id, row.id))
    }

    /// Repeats a 1xm row `n` times.
    pub fn broadcast_rows(self, n: usize) -> Result<Var<'t>> {
        let a = self.value();
        if a.rows() != 1 || n == 0 {
            return Err(Error::dim("broadcast_rows", a.shape(), Shape(n, a.cols())));
        }
        let data = a.data().repeat(n);
        self.tape
            .push("broadcast_rows", Matrix::from_parts(n, a.cols(), data), Op::BroadcastRows(self.id))
    }

    /// Repeats an nx1 column `m` times.
    pub fn broadcast_cols(self, m: usize) -> Result<Var<'t>> {
        let a = self.value();
        if a.cols() != 1 || m == 0 {
            return Err(Error::dim("broadcast_cols", a.shape(), Shape(a.rows(), m)));
        }
        let value = Matrix::from_fn(a.rows(), m, |i, _| a.get(i, 0));
        self.tape.push("broadcast_cols", value, Op::BroadcastCols(self.id))
    }

    /// nxm -> nx1.
    pub fn row_sum(self) -> Result<Var<'t>> {
        let a = self.value();
        let value = Matrix::from_parts(a.rows(), 1, a.row_sums());
        self.tape.push("row_sum", value, Op::RowSum(self.id))
    }

    /// nxm -> 1xm.
    pub fn col_sum(self) -> Result<Var<'t>> {
        let a = self.value();
        let value = Matrix::from_parts(1, a.cols(), a.col_sums());
        self.tape.push("col_sum", value, Op::ColSum(self.id))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let value = Matrix::scalar(self.value().sum());
        self.tape.push("sum", value, Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    pub fn recip(self) -> Result<Var<'t>> {
        self.unary("recip", Op::Recip(self.id), |v| 1.0 / v)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        if self.value().data().iter().any(|&v| v < 0.0) {
            return Err(Error::Degenerate {
                op: "sqrt",
                detail: "negative input".into(),
            });
        }
        self.unary("sqrt", Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", Op::Exp(self.id), f64::exp)
    }

    /// Natural log of `max(x, floor)`; the gradient is zero where the floor
    /// is active.
    pub fn log_clamped(self, floor: f64) -> Result<Var<'t>> {
        self.unary(
            "log",
            Op::Log {
                input: self.id,
                floor,
            },
            |v| v.max(floor).ln(),
        )
    }

    pub fn leaky_relu(self, slope: f64) -> Result<Var<'t>> {
        self.unary(
            "leaky_relu",
            Op::LeakyRelu {
                input: self.id,
                slope,
            },
            |v| if v > 0.0 { v } else { slope * v },
        )
    }

    /// Softmax over each row, with max subtraction.
    pub fn row_softmax(self) -> Result<Var<'t>> {
        let value = softmax_rows(&self.value());
        self.tape.push("row_softmax", value, Op::Softmax(self.id))
    }

    /// Log-softmax over each row.
    pub fn row_log_softmax(self) -> Result<Var<'t>> {
        let a = self.value();
        let mut out = (*a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.tape.push("row_log_softmax", out, Op::LogSoftmax(self.id))
    }

    /// Entry (i, j) is `-||self_i - other_j||^2`.
    pub fn pairwise_neg_sqdist(self, other: Var<'t>) -> Result<Var<'t>> {
        let (x, y) = (self.value(), other.value());
        if x.cols() != y.cols() {
            return Err(Error::dim("pairwise_neg_sqdist", x.shape(), y.shape()));
        }
        let value = Matrix::from_fn(x.rows(), y.rows(), |i, j| {
            -x.row(i)
                .iter()
                .zip(y.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        });
        self.tape.push(
            "pairwise_neg_sqdist",
            value,
            Op::PairwiseNegSqDist(self.id, other.id),
        )
    }

    pub fn hconcat(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.value().hconcat(&other.value())?;
        self.tape.push("hconcat", value, Op::HConcat(self.id, other.id))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        if len == 0 || start + len > a.cols() {
            return Err(Error::dim("slice_cols", a.shape(), Shape(a.rows(), start + len)));
        }
        let value = Matrix::from_fn(a.rows(), len, |i, j| a.get(i, start + j));
        self.tape
            .push("slice_cols", value, Op::SliceCols { input: self.id, start })
    }

    fn pad_cols(self, start: usize, total: usize) -> Result<Var<'t>> {
        let a = self.value();
        if start + a.cols() > total {
            return Err(Error::dim("pad_cols", a.shape(), Shape(a.rows(), total)));
        }
        let value = Matrix::from_fn(a.rows(), total, |i, j| {
            if j >= start && j < start + a.cols() {
                a.get(i, j - start)
            } else {
                0.0
            }
        });
        self.tape
            .push("pad_cols", value, Op::PadCols { input: self.id, start })
    }
}

pub(crate) fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

pub mod fault {
    //! Deliberate corruption of backward rules, for mutation-testing the
    //! gradient checker. Only active with the `fault-injection` feature; the
    //! switch is per thread so concurrent work is unaffected.
    use super::Var;
    use crate::error::Result;

    #[cfg(feature = "fault-injection")]
    thread_local! {
        static SOFTMAX_SIGN_FLIP: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
    }

    /// Whether this build carries the fault hooks.
    pub const AVAILABLE: bool = cfg!(feature = "fault-injection");

    /// Flip the sign of the softmax backward rule on the current thread.
    pub fn set_softmax_sign_flip(on: bool) -> Result<()> {
        #[cfg(feature = "fault-injection")]
        {
            SOFTMAX_SIGN_FLIP.with(|f| f.set(on));
            Ok(())
        }
        #[cfg(not(feature = "fault-injection"))]
        {
            if on {
                Err(crate::error::Error::Config("built without the fault-injection feature".into()))
            } else {
                Ok(())
            }
        }
    }

    #[inline]
    pub(super) fn softmax_backward(grad: Var<'_>) -> Result<Var<'_>> {
        #[cfg(feature = "fault-injection")]
        if SOFTMAX_SIGN_FLIP.with(|f| f.get()) {
            return grad.neg();
        }
        Ok(grad)
    }
}
