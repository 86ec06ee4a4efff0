//! Computation-graph nodes and their forward kernels.
//!
//! Values are computed eagerly when a node is built, so shape and domain
//! errors surface at construction. Every node is immutable and shared via
//! `Arc`, which lets finished graphs cross thread boundaries.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::tensor::{broadcast_index_map, broadcast_shapes, numel};
use super::{AutodiffError, Tensor, EPS};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Operation tag of a graph node.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    /// `a / (b + EPS)`
    Div,
    Neg,
    Scale(f64),
    MatMul,
    Transpose,
    Relu,
    /// Heaviside step `1[x > 0]`; carries no gradient.
    Step,
    Exp,
    /// `ln(x + EPS)`
    Log,
    /// `sqrt(x)`, with inputs in `[-EPS, 0)` clamped to zero.
    Sqrt,
    Square,
    /// Sum-reduce to a shape that broadcasts back to the input shape.
    SumTo(Vec<usize>),
    BroadcastTo(Vec<usize>),
    Reshape(Vec<usize>),
    /// Max over the last axis.
    MaxLast,
    /// One-hot of the last-axis argmax (lowest index on ties); carries no gradient.
    ArgMaxMask,
    /// Log-sum-exp over the last axis, max-shifted.
    LogSumExp,
    /// Select rows (leading-axis slices) by index.
    Gather(Arc<[usize]>),
    /// Adjoint of `Gather`: scatter-add rows into `rows` leading slots.
    Scatter { index: Arc<[usize]>, rows: usize },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Relu => "relu",
            Op::Step => "step",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Square => "square",
            Op::SumTo(_) => "sum",
            Op::BroadcastTo(_) => "broadcast",
            Op::Reshape(_) => "reshape",
            Op::MaxLast => "max",
            Op::ArgMaxMask => "argmax_mask",
            Op::LogSumExp => "log_sum_exp",
            Op::Gather(_) => "gather",
            Op::Scatter { .. } => "scatter",
        }
    }

    /// Ops whose derivative is zero almost everywhere.
    pub(crate) fn is_piecewise_constant(&self) -> bool {
        matches!(self, Op::Step | Op::ArgMaxMask)
    }
}

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) op: Op,
    pub(crate) inputs: Vec<Expr>,
    pub(crate) value: Tensor,
}

/// Handle to a node in a dynamically built computation graph.
#[derive(Clone)]
pub struct Expr(pub(crate) Arc<Node>);

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr#{}({}, shape={:?})", self.0.id, self.0.op.name(), self.shape())
    }
}

type Result<T> = std::result::Result<T, AutodiffError>;

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

impl Expr {
    fn make(op: Op, inputs: Vec<Expr>) -> Result<Self> {
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|e| &e.0.value).collect();
            forward(&op, &vals)?
        };
        Ok(Self::with_value(op, inputs, value))
    }

    fn with_value(op: Op, inputs: Vec<Expr>, value: Tensor) -> Self {
        let id = NEXT_ID.fetch_add(1, Ordering::Relaxed);
        Expr(Arc::new(Node { id, op, inputs, value }))
    }

    /// A leaf node. Parameters and constants are both leaves; which leaves
    /// get gradients is decided by the caller of `grad`.
    pub fn leaf(value: Tensor) -> Self {
        Self::with_value(Op::Leaf, Vec::new(), value)
    }

    pub fn scalar(value: f64) -> Self {
        Self::leaf(Tensor::scalar(value))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::leaf(Tensor::zeros(shape))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn op(&self) -> &Op {
        &self.0.op
    }

    pub fn inputs(&self) -> &[Expr] {
        &self.0.inputs
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op == Op::Leaf
    }

    /// The eagerly computed value of this node.
    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    /// Value of a one-element node.
    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    /// Same value as a fresh leaf, cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::leaf(self.0.value.clone())
    }

    // ---- elementwise binary ops, with implicit numpy broadcasting ----

    fn binary(&self, other: &Expr, op: Op) -> Result<Self> {
        let (a, b) = self.broadcast_pair(other, op.name())?;
        Self::make(op, vec![a, b])
    }

    fn broadcast_pair(&self, other: &Expr, name: &'static str) -> Result<(Expr, Expr)> {
        if self.shape() == other.shape() {
            return Ok((self.clone(), other.clone()));
        }
        let target = broadcast_shapes(self.shape(), other.shape()).ok_or_else(|| {
            mismatch(name, format!("{:?} vs {:?} do not broadcast", self.shape(), other.shape()))
        })?;
        Ok((self.broadcast_to(&target)?, other.broadcast_to(&target)?))
    }

    pub fn add(&self, other: &Expr) -> Result<Self> {
        self.binary(other, Op::Add)
    }

    pub fn sub(&self, other: &Expr) -> Result<Self> {
        self.binary(other, Op::Sub)
    }

    pub fn mul(&self, other: &Expr) -> Result<Self> {
        self.binary(other, Op::Mul)
    }

    /// Guarded division `self / (other + EPS)`.
    pub fn div(&self, other: &Expr) -> Result<Self> {
        self.binary(other, Op::Div)
    }

    // ---- unary ops ----

    fn unary(&self, op: Op) -> Self {
        Self::make(op, vec![self.clone()]).expect("unary op cannot fail")
    }

    pub fn neg(&self) -> Self {
        self.unary(Op::Neg)
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.unary(Op::Scale(factor))
    }

    pub fn relu(&self) -> Self {
        self.unary(Op::Relu)
    }

    pub fn step(&self) -> Self {
        self.unary(Op::Step)
    }

    pub fn exp(&self) -> Self {
        self.unary(Op::Exp)
    }

    pub fn square(&self) -> Self {
        self.unary(Op::Square)
    }

    /// Guarded natural log `ln(self + EPS)`.
    pub fn ln(&self) -> Result<Self> {
        Self::make(Op::Log, vec![self.clone()])
    }

    pub fn sqrt(&self) -> Result<Self> {
        Self::make(Op::Sqrt, vec![self.clone()])
    }

    // ---- linear algebra and shape ops ----

    pub fn matmul(&self, other: &Expr) -> Result<Self> {
        Self::make(Op::MatMul, vec![self.clone(), other.clone()])
    }

    pub fn transpose(&self) -> Result<Self> {
        Self::make(Op::Transpose, vec![self.clone()])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape == self.shape() {
            return Ok(self.clone());
        }
        Self::make(Op::Reshape(shape.to_vec()), vec![self.clone()])
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        if shape == self.shape() {
            return Ok(self.clone());
        }
        Self::make(Op::BroadcastTo(shape.to_vec()), vec![self.clone()])
    }

    /// Sum-reduce to `shape`, which must broadcast back to `self.shape()`.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Self> {
        if shape == self.shape() {
            return Ok(self.clone());
        }
        Self::make(Op::SumTo(shape.to_vec()), vec![self.clone()])
    }

    /// Sum of all elements, shape `[]`.
    pub fn sum(&self) -> Self {
        self.sum_to(&[]).expect("full reduction always valid")
    }

    pub fn mean(&self) -> Self {
        let n = self.value().numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(mismatch("sum", format!("axis {axis} out of range for {shape:?}")));
        }
        let mut keep = shape.to_vec();
        keep[axis] = 1;
        let mut dropped = shape.to_vec();
        dropped.remove(axis);
        self.sum_to(&keep)?.reshape(&dropped)
    }

    pub fn max_last(&self) -> Result<Self> {
        Self::make(Op::MaxLast, vec![self.clone()])
    }

    pub fn argmax_mask(&self) -> Result<Self> {
        Self::make(Op::ArgMaxMask, vec![self.clone()])
    }

    /// Log-sum-exp over the last axis.
    pub fn log_sum_exp(&self) -> Result<Self> {
        Self::make(Op::LogSumExp, vec![self.clone()])
    }

    /// Row-wise log-softmax of a `[.., C]` array.
    pub fn log_softmax(&self) -> Result<Self> {
        let lse = self.log_sum_exp()?.unsqueeze_last()?;
        self.sub(&lse)
    }

    pub fn softmax(&self) -> Result<Self> {
        Ok(self.log_softmax()?.exp())
    }

    /// Appends a trailing axis of length one.
    pub fn unsqueeze_last(&self) -> Result<Self> {
        let mut shape = self.shape().to_vec();
        shape.push(1);
        self.reshape(&shape)
    }

    pub fn gather(&self, index: &[usize]) -> Result<Self> {
        Self::make(Op::Gather(index.into()), vec![self.clone()])
    }

    pub fn scatter(&self, index: &[usize], rows: usize) -> Result<Self> {
        Self::make(Op::Scatter { index: index.into(), rows }, vec![self.clone()])
    }

    /// Recomputes this node's value from scratch, substituting `overrides`
    /// (keyed by node id) for the values of the listed leaves.
    pub fn evaluate_with(&self, overrides: &HashMap<u64, Tensor>) -> Result<Tensor> {
        let order = topo_order(self);
        let mut values: HashMap<u64, Tensor> = HashMap::with_capacity(order.len());
        for node in &order {
            let value = if node.is_leaf() {
                overrides.get(&node.id()).cloned().unwrap_or_else(|| node.value().clone())
            } else {
                let inputs: Vec<&Tensor> = node.inputs().iter().map(|i| &values[&i.id()]).collect();
                forward(node.op(), &inputs)?
            };
            values.insert(node.id(), value);
        }
        Ok(values.remove(&self.id()).expect("root evaluated"))
    }
}

/// Nodes reachable from `root` in post-order (inputs before consumers).
pub(crate) fn topo_order(root: &Expr) -> Vec<Expr> {
    let mut order = Vec::new();
    let mut visited = std::collections::HashSet::new();
    let mut stack: Vec<(Expr, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.id());
    while let Some((node, child)) = stack.pop() {
        if child < node.inputs().len() {
            let next = node.inputs()[child].clone();
            stack.push((node, child + 1));
            if visited.insert(next.id()) {
                stack.push((next, 0));
            }
        } else {
            order.push(node);
        }
    }
    order
}

fn elementwise2(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn last_axis(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape().last() {
        Some(&n) if n > 0 => Ok((t.numel() / n, n)),
        _ => Err(mismatch(op, format!("needs a non-empty last axis, got {:?}", t.shape()))),
    }
}

/// Forward kernel shared by eager construction and re-evaluation.
pub(crate) fn forward(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let name = op.name();
    match op {
        Op::Leaf => unreachable!("leaves have no kernel"),
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(mismatch(name, format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
            let out = match op {
                Op::Add => elementwise2(a, b, |x, y| x + y),
                Op::Sub => elementwise2(a, b, |x, y| x - y),
                Op::Mul => elementwise2(a, b, |x, y| x * y),
                _ => elementwise2(a, b, |x, y| x / (y + EPS)),
            };
            if matches!(op, Op::Div) && !out.is_finite() && a.is_finite() && b.is_finite() {
                return Err(AutodiffError::Domain { op: name, detail: "denominator is -EPS".into() });
            }
            Ok(out)
        }
        Op::Neg => Ok(inputs[0].map(|x| -x)),
        Op::Scale(c) => Ok(inputs[0].map(|x| c * x)),
        Op::Relu => Ok(inputs[0].map(|x| if x > 0.0 { x } else { 0.0 })),
        Op::Step => Ok(inputs[0].map(|x| if x > 0.0 { 1.0 } else { 0.0 })),
        Op::Exp => Ok(inputs[0].map(f64::exp)),
        Op::Square => Ok(inputs[0].map(|x| x * x)),
        Op::Log => {
            let x = inputs[0];
            if let Some(bad) = x.data().iter().find(|&&v| v + EPS <= 0.0) {
                return Err(AutodiffError::Domain { op: name, detail: format!("ln of {bad}") });
            }
            Ok(x.map(|v| (v + EPS).ln()))
        }
        Op::Sqrt => {
            let x = inputs[0];
            if let Some(bad) = x.data().iter().find(|&&v| v < -EPS) {
                return Err(AutodiffError::Domain { op: name, detail: format!("sqrt of {bad}") });
            }
            Ok(x.map(|v| v.max(0.0).sqrt()))
        }
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(mismatch(name, format!("{:?} x {:?}", a.shape(), b.shape())));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![0.0; m * n];
            let (ad, bd) = (a.data(), b.data());
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = ad[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &bd[p * n..(p + 1) * n];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += aip * bv;
                    }
                }
            }
            Tensor::new(vec![m, n], out)
        }
        Op::Transpose => {
            let a = inputs[0];
            if a.rank() != 2 {
                return Err(mismatch(name, format!("needs a matrix, got {:?}", a.shape())));
            }
            let (m, n) = (a.shape()[0], a.shape()[1]);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = a.data()[i * n + j];
                }
            }
            Tensor::new(vec![n, m], out)
        }
        Op::SumTo(shape) => {
            let a = inputs[0];
            let map = broadcast_index_map(shape, a.shape()).ok_or_else(|| {
                mismatch(name, format!("cannot reduce {:?} to {shape:?}", a.shape()))
            })?;
            let mut out = vec![0.0; numel(shape)];
            for (&dst, &v) in map.iter().zip(a.data()) {
                out[dst] += v;
            }
            Tensor::new(shape.clone(), out)
        }
        Op::BroadcastTo(shape) => {
            let a = inputs[0];
            let map = broadcast_index_map(a.shape(), shape).ok_or_else(|| {
                mismatch(name, format!("cannot broadcast {:?} to {shape:?}", a.shape()))
            })?;
            Tensor::new(shape.clone(), map.iter().map(|&i| a.data()[i]).collect())
        }
        Op::Reshape(shape) => {
            let a = inputs[0];
            if numel(shape) != a.numel() {
                return Err(mismatch(name, format!("{:?} to {shape:?}", a.shape())));
            }
            Tensor::new(shape.clone(), a.data().to_vec())
        }
        Op::MaxLast | Op::ArgMaxMask | Op::LogSumExp => {
            let a = inputs[0];
            let (rows, n) = last_axis(a, name)?;
            let out_shape = a.shape()[..a.rank() - 1].to_vec();
            let mut mask = vec![0.0; a.numel()];
            let mut out = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &a.data()[r * n..(r + 1) * n];
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                let m = row[best];
                match op {
                    Op::MaxLast => out.push(m),
                    Op::ArgMaxMask => mask[r * n + best] = 1.0,
                    _ => {
                        if m.is_infinite() {
                            out.push(m);
                        } else {
                            let s: f64 = row.iter().map(|&v| (v - m).exp()).sum();
                            out.push(m + s.ln());
                        }
                    }
                }
            }
            if matches!(op, Op::ArgMaxMask) {
                Tensor::new(a.shape().to_vec(), mask)
            } else {
                Tensor::new(out_shape, out)
            }
        }
        Op::Gather(index) => {
            let a = inputs[0];
            if a.rank() == 0 {
                return Err(mismatch(name, "cannot gather from a scalar".into()));
            }
            let rows = a.shape()[0];
            let width = a.numel() / rows.max(1);
            let mut out = Vec::with_capacity(index.len() * width);
            for &i in index.iter() {
                if i >= rows {
                    return Err(mismatch(name, format!("row {i} out of {rows}")));
                }
                out.extend_from_slice(&a.data()[i * width..(i + 1) * width]);
            }
            let mut shape = a.shape().to_vec();
            shape[0] = index.len();
            Tensor::new(shape, out)
        }
        Op::Scatter { index, rows } => {
            let a = inputs[0];
            if a.rank() == 0 || a.shape()[0] != index.len() {
                return Err(mismatch(name, format!("{:?} vs {} indices", a.shape(), index.len())));
            }
            let width = a.numel() / index.len().max(1);
            let mut out = vec![0.0; rows * width];
            for (src, &dst) in index.iter().enumerate() {
                if dst >= *rows {
                    return Err(mismatch(name, format!("row {dst} out of {rows}")));
                }
                for j in 0..width {
                    out[dst * width + j] += a.data()[src * width + j];
                }
            }
            let mut shape = a.shape().to_vec();
            shape[0] = *rows;
            Tensor::new(shape, out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(shape: &[usize], data: &[f64]) -> Expr {
        Expr::leaf(Tensor::new(shape.to_vec(), data.to_vec()).unwrap())
    }

    #[test]
    fn square_of_three() {
        assert_eq!(Expr::scalar(3.0).square().item(), 9.0);
    }

    #[test]
    fn relu_of_negative() {
        assert_eq!(Expr::scalar(-2.0).relu().item(), 0.0);
    }

    #[test]
    fn log_sum_exp_of_zeros() {
        let x = leaf(&[2], &[0.0, 0.0]);
        assert!((x.log_sum_exp().unwrap().item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn log_sum_exp_is_stable_for_large_inputs() {
        let x = leaf(&[2], &[1000.0, 1000.0]);
        let v = x.log_sum_exp().unwrap().item();
        assert!((v - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);
    }

    #[test]
    fn matmul_shape_error_is_eager() {
        let a = leaf(&[2, 3], &[0.0; 6]);
        let b = leaf(&[2, 3], &[0.0; 6]);
        assert!(matches!(a.matmul(&b), Err(AutodiffError::ShapeMismatch { .. })));
    }

    #[test]
    fn incompatible_broadcast_errors() {
        let a = leaf(&[3], &[0.0; 3]);
        let b = leaf(&[4], &[0.0; 4]);
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn add_broadcasts_row_vector() {
        let a = leaf(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&[2], &[10.0, 20.0]);
        assert_eq!(a.add(&b).unwrap().value().data(), &[11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn log_domain_error() {
        assert!(matches!(Expr::scalar(-1.0).ln(), Err(AutodiffError::Domain { .. })));
        // zero is repaired by the epsilon guard
        assert!(Expr::scalar(0.0).ln().unwrap().item().is_finite());
    }

    #[test]
    fn sqrt_clamps_tiny_negatives() {
        assert_eq!(Expr::scalar(-1e-14).sqrt().unwrap().item(), 0.0);
        assert!(Expr::scalar(-1e-3).sqrt().is_err());
    }

    #[test]
    fn gather_and_scatter_rows() {
        let a = leaf(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let g = a.gather(&[2, 0, 2]).unwrap();
        assert_eq!(g.value().data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = g.scatter(&[2, 0, 2], 3).unwrap();
        assert_eq!(s.value().data(), &[1.0, 2.0, 0.0, 0.0, 10.0, 12.0]);
    }

    #[test]
    fn sum_axis_and_mean() {
        let a = leaf(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(a.sum_axis(1).unwrap().value().data(), &[6.0, 15.0]);
        assert_eq!(a.sum_axis(0).unwrap().value().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(a.mean().item(), 3.5);
    }

    #[test]
    fn argmax_mask_breaks_ties_low() {
        let a = leaf(&[2, 3], &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        let m = a.argmax_mask().unwrap();
        assert_eq!(m.value().data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(a.max_last().unwrap().value().data(), &[1.0, 2.0]);
    }

    #[test]
    fn reevaluation_reproduces_stored_value() {
        let x = leaf(&[2, 2], &[0.3, -1.2, 2.0, 0.5]);
        let w = leaf(&[2, 2], &[1.0, 0.5, -0.5, 2.0]);
        let y = x.matmul(&w).unwrap().relu().log_softmax().unwrap().sum();
        let again = y.evaluate_with(&HashMap::new()).unwrap();
        assert_eq!(again.data(), y.value().data());
    }
}
