//! Reverse-mode differentiation that emits gradients as graph nodes.
//!
//! Every vector-Jacobian product is itself built from `Expr` ops, so a
//! gradient can be differentiated again. This is what lets a loss evaluated
//! at `p - lr * grad(p)` be differentiated with respect to `p`.

use std::collections::{HashMap, HashSet};

use super::expr::{topo_order, Op};
use super::{AutodiffError, Expr};

type Result<T> = std::result::Result<T, AutodiffError>;

/// Gradients of a scalar with respect to a list of leaves, in request order.
#[derive(Clone, Debug)]
pub struct GradMap {
    entries: Vec<(Expr, Expr)>,
}

impl GradMap {
    pub fn from_entries(entries: Vec<(Expr, Expr)>) -> Self {
        Self { entries }
    }

    /// Gradient for `param`, looked up by node identity.
    pub fn get(&self, param: &Expr) -> Option<&Expr> {
        self.entries.iter().find(|(p, _)| p.id() == param.id()).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Expr, &Expr)> {
        self.entries.iter().map(|(p, g)| (p, g))
    }

    pub fn grads(&self) -> impl Iterator<Item = &Expr> {
        self.entries.iter().map(|(_, g)| g)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// L2 norm of all gradient entries viewed as one concatenated vector.
    pub fn global_norm(&self) -> f64 {
        self.grads().map(|g| g.value().sq_norm()).sum::<f64>().sqrt()
    }

    /// Merge two maps; entries of `other` follow those of `self`.
    pub fn concat(mut self, other: GradMap) -> Self {
        self.entries.extend(other.entries);
        self
    }
}

fn vjp(node: &Expr, g: &Expr) -> Result<Vec<Expr>> {
    let ins = node.inputs();
    let out = match node.op() {
        Op::Leaf | Op::Step | Op::ArgMaxMask => Vec::new(),
        Op::Add => vec![g.clone(), g.clone()],
        Op::Sub => vec![g.clone(), g.neg()],
        Op::Mul => vec![g.mul(&ins[1])?, g.mul(&ins[0])?],
        Op::Div => {
            // d/da a/(b+e) = 1/(b+e);  d/db = -a/(b+e)^2 = -out/(b+e)
            let ga = g.div(&ins[1])?;
            let gb = g.mul(node)?.div(&ins[1])?.neg();
            vec![ga, gb]
        }
        Op::Neg => vec![g.neg()],
        Op::Scale(c) => vec![g.scale(*c)],
        Op::MatMul => {
            let ga = g.matmul(&ins[1].transpose()?)?;
            let gb = ins[0].transpose()?.matmul(g)?;
            vec![ga, gb]
        }
        Op::Transpose => vec![g.transpose()?],
        Op::Relu => vec![g.mul(&ins[0].step())?],
        Op::Exp => vec![g.mul(node)?],
        Op::Log => vec![g.div(&ins[0])?],
        Op::Sqrt => vec![g.div(&node.scale(2.0))?],
        Op::Square => vec![g.mul(&ins[0])?.scale(2.0)],
        Op::SumTo(_) => vec![g.broadcast_to(ins[0].shape())?],
        Op::BroadcastTo(_) => vec![g.sum_to(ins[0].shape())?],
        Op::Reshape(_) => vec![g.reshape(ins[0].shape())?],
        Op::MaxLast => {
            let spread = g.unsqueeze_last()?.broadcast_to(ins[0].shape())?;
            vec![spread.mul(&ins[0].argmax_mask()?)?]
        }
        Op::LogSumExp => {
            let spread = g.unsqueeze_last()?.broadcast_to(ins[0].shape())?;
            let softmax = ins[0].sub(&node.unsqueeze_last()?)?.exp();
            vec![spread.mul(&softmax)?]
        }
        Op::Gather(index) => vec![g.scatter(index, ins[0].shape()[0])?],
        Op::Scatter { index, .. } => vec![g.gather(index)?],
    };
    Ok(out)
}

/// Differentiates a scalar with respect to `params`.
///
/// Parameters not reachable from `scalar` receive zero gradients. The
/// returned gradients are graph nodes and may be differentiated again.
pub fn grad(scalar: &Expr, params: &[Expr]) -> Result<GradMap> {
    if !scalar.shape().is_empty() {
        return Err(AutodiffError::NonScalarRoot(scalar.shape().to_vec()));
    }
    let order = topo_order(scalar);
    let wanted: HashSet<u64> = params.iter().map(Expr::id).collect();

    // nodes with a differentiable path to some requested parameter
    let mut live: HashSet<u64> = HashSet::new();
    for node in &order {
        let reaches = wanted.contains(&node.id())
            || (!node.op().is_piecewise_constant()
                && node.inputs().iter().any(|i| live.contains(&i.id())));
        if reaches {
            live.insert(node.id());
        }
    }

    let mut adjoint: HashMap<u64, Expr> = HashMap::new();
    if live.contains(&scalar.id()) {
        adjoint.insert(scalar.id(), Expr::scalar(1.0));
    }
    for node in order.iter().rev() {
        if node.is_leaf() || !live.contains(&node.id()) {
            continue;
        }
        let Some(g) = adjoint.remove(&node.id()) else { continue };
        let contributions = vjp(node, &g)?;
        for (input, contrib) in node.inputs().iter().zip(contributions) {
            if !live.contains(&input.id()) {
                continue;
            }
            let acc = match adjoint.remove(&input.id()) {
                Some(prev) => prev.add(&contrib)?,
                None => contrib,
            };
            adjoint.insert(input.id(), acc);
        }
    }

    let entries = params
        .iter()
        .map(|p| {
            let g = adjoint.get(&p.id()).cloned().unwrap_or_else(|| Expr::zeros(p.shape()));
            (p.clone(), g)
        })
        .collect();
    Ok(GradMap { entries })
}

/// Rescales all gradients together so their global L2 norm is at most
/// `threshold`. The rescaling factor is a graph node, so clipped gradients
/// stay differentiable.
pub fn clip_by_norm(grads: &GradMap, threshold: f64) -> Result<GradMap> {
    if !(threshold > 0.0) {
        return Err(AutodiffError::InvalidArgument(format!("clip threshold {threshold} must be > 0")));
    }
    let norm = grads.global_norm();
    if norm <= threshold + 1e-12 {
        return Ok(grads.clone());
    }
    let mut sq = Expr::scalar(0.0);
    for g in grads.grads() {
        sq = sq.add(&g.square().sum())?;
    }
    let factor = Expr::scalar(threshold).div(&sq.sqrt()?)?;
    let entries = grads
        .iter()
        .map(|(p, g)| Ok((p.clone(), g.mul(&factor)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradMap { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn vec_leaf(v: &[f64]) -> Expr {
        Expr::leaf(Tensor::from_vec(v.to_vec()))
    }

    #[test]
    fn derivative_of_square() {
        let x = Expr::scalar(3.0);
        let g = grad(&x.square(), std::slice::from_ref(&x)).unwrap();
        assert_eq!(g.get(&x).unwrap().item(), 6.0);
    }

    #[test]
    fn second_derivative_of_cube() {
        let x = Expr::scalar(2.0);
        let cube = x.square().mul(&x).unwrap();
        let d1 = grad(&cube, std::slice::from_ref(&x)).unwrap().get(&x).unwrap().clone();
        assert!((d1.item() - 12.0).abs() < 1e-12);
        let d2 = grad(&d1, std::slice::from_ref(&x)).unwrap();
        assert!((d2.get(&x).unwrap().item() - 12.0).abs() < 1e-12);
    }

    #[test]
    fn through_one_sgd_step() {
        // f(w) = (w - 0.1 * 2w)^2, df/dw = 2 * 0.8^2 * w
        let w = Expr::scalar(1.0);
        let gw = grad(&w.square(), std::slice::from_ref(&w)).unwrap().get(&w).unwrap().clone();
        let w2 = w.sub(&gw.scale(0.1)).unwrap();
        let d = grad(&w2.square(), std::slice::from_ref(&w)).unwrap();
        assert!((d.get(&w).unwrap().item() - 1.28).abs() < 1e-12);
    }

    #[test]
    fn unreachable_param_gets_zero() {
        let x = Expr::scalar(1.0);
        let y = vec_leaf(&[1.0, 2.0]);
        let g = grad(&x.square(), std::slice::from_ref(&y)).unwrap();
        assert_eq!(g.get(&y).unwrap().value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let y = vec_leaf(&[1.0, 2.0]);
        assert!(matches!(grad(&y, std::slice::from_ref(&y)), Err(AutodiffError::NonScalarRoot(_))));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f = x*x + x, f' = 2x + 1
        let x = Expr::scalar(1.5);
        let f = x.mul(&x).unwrap().add(&x).unwrap();
        let g = grad(&f, std::slice::from_ref(&x)).unwrap();
        assert_eq!(g.get(&x).unwrap().item(), 4.0);
    }

    fn clip_values(v: &[f64], threshold: f64) -> Vec<f64> {
        let p = vec_leaf(&[0.0; 2][..v.len()]);
        let map = GradMap::from_entries(vec![(p, vec_leaf(v))]);
        let clipped = clip_by_norm(&map, threshold).unwrap();
        let v = clipped.grads().next().unwrap().value().data().to_vec();
        v
    }

    #[test]
    fn clip_three_four() {
        let out = clip_values(&[3.0, 4.0], 2.0);
        assert!((out[0] - 1.2).abs() < 1e-12 && (out[1] - 1.6).abs() < 1e-12);
    }

    #[test]
    fn clip_below_threshold_is_identity() {
        assert_eq!(clip_values(&[0.1, 0.1], 2.0), vec![0.1, 0.1]);
        assert_eq!(clip_values(&[0.0, 0.0], 2.0), vec![0.0, 0.0]);
    }

    #[test]
    fn clip_is_global_across_entries() {
        let a = Expr::scalar(0.0);
        let b = Expr::scalar(0.0);
        let map = GradMap::from_entries(vec![(a, Expr::scalar(3.0)), (b, Expr::scalar(4.0))]);
        let clipped = clip_by_norm(&map, 2.0).unwrap();
        let vals: Vec<f64> = clipped.grads().map(Expr::item).collect();
        assert!((vals[0] - 1.2).abs() < 1e-12 && (vals[1] - 1.6).abs() < 1e-12);
    }

    #[test]
    fn clip_rejects_non_positive_threshold() {
        let map = GradMap::from_entries(vec![]);
        assert!(clip_by_norm(&map, 0.0).is_err());
    }
}
