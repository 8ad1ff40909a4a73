//! Reverse-mode gradient computation.
//!
//! [`grad`] walks the graph once in reverse topological order and builds the
//! adjoint of every reachable differentiable node. Adjoints are constructed
//! with the ordinary [`Var`] ops, so each returned gradient is itself a
//! differentiable expression: calling [`grad`] on an entry of a
//! [`GradientMap`] yields second-order derivatives.

use std::collections::{HashMap, HashSet};

use super::{Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients keyed by the node they differentiate with respect to. Absent
/// entries mean the root does not depend on that node; their gradient is
/// identically zero.
pub struct GradientMap {
    adjoints: HashMap<u64, Var>,
}

impl GradientMap {
    /// Gradient of the root with respect to `v`, or `None` when the root
    /// does not depend on `v`.
    pub fn get(&self, v: &Var) -> Option<&Var> {
        self.adjoints.get(&v.id())
    }

    /// Gradient of the root with respect to `v`; a zero constant of `v`'s
    /// shape when the root does not depend on `v` (the derivative of that
    /// zero is also identically zero, so higher-order use stays correct).
    pub fn get_or_zero(&self, v: &Var) -> Var {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Var::constant(Tensor::zeros(v.dtype(), v.shape().to_vec())),
        }
    }
}

/// Postorder over the differentiable subgraph reachable from `root`.
/// Traversal descends only into parents with `requires_grad`, so constants
/// and zero-derivative ops (sign, step, stop_gradient) prune their subtrees.
fn topo_order(root: &Var) -> Vec<Var> {
    let mut order = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Var, bool)> = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !seen.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        for p in v.parents() {
            if p.requires_grad() {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

/// Per-parent adjoint contributions of one node. `adj` is the adjoint of
/// `v`; the result pairs each differentiable parent's id with its share.
fn parent_contributions(v: &Var, adj: &Var) -> Result<Vec<(u64, Var)>> {
    let parents = v.parents();
    let mut out = Vec::with_capacity(parents.len());
    let mut push = |p: &Var, c: Var| {
        if p.requires_grad() {
            out.push((p.id(), c));
        }
    };
    match v.op() {
        Op::Leaf | Op::StopGradient | Op::Sign | Op::Step => {}
        Op::Add => {
            push(&parents[0], adj.clone());
            push(&parents[1], adj.clone());
        }
        Op::Sub => {
            push(&parents[0], adj.clone());
            push(&parents[1], adj.neg());
        }
        Op::Mul => {
            push(&parents[0], adj.mul(&parents[1])?);
            push(&parents[1], adj.mul(&parents[0])?);
        }
        Op::Div => {
            let (a, b) = (&parents[0], &parents[1]);
            push(a, adj.div(b)?);
            push(b, adj.mul(a)?.div(&b.mul(b)?)?.neg());
        }
        Op::Neg => push(&parents[0], adj.neg()),
        Op::Relu => {
            // step(x) carries no gradient of its own: the relu mask is
            // treated as locally constant, which is exact away from 0.
            push(&parents[0], adj.mul(&parents[0].step())?);
        }
        Op::Tanh => {
            let y = v;
            push(&parents[0], adj.mul(&y.mul(y)?.neg().add_const(1.0))?);
        }
        Op::Exp => push(&parents[0], adj.mul(v)?),
        Op::Log => push(&parents[0], adj.div(&parents[0])?),
        Op::Sqrt => push(&parents[0], adj.scale_const(0.5).div(v)?),
        Op::AddConst(_) => push(&parents[0], adj.clone()),
        Op::ScaleConst(c) => push(&parents[0], adj.scale_const(*c)),
        Op::Matmul => {
            let (a, b) = (&parents[0], &parents[1]);
            push(a, adj.matmul(&b.transpose()?)?);
            push(b, a.transpose()?.matmul(adj)?);
        }
        Op::Transpose => push(&parents[0], adj.transpose()?),
        Op::Reshape => push(&parents[0], adj.reshape(parents[0].shape().to_vec())?),
        Op::SumAll => push(&parents[0], adj.broadcast_scalar(parents[0].shape().to_vec())?),
        Op::BroadcastScalar => push(&parents[0], adj.sum_all()),
        Op::SumAxis(axis) => {
            let n = parents[0].shape()[*axis];
            push(&parents[0], adj.broadcast_axis(*axis, n)?);
        }
        Op::BroadcastAxis(axis) => push(&parents[0], adj.sum_axis(*axis)?),
        Op::GatherRows(indices) => {
            let rows = parents[0].shape()[0];
            push(&parents[0], adj.scatter_add_rows(indices.as_ref().clone(), rows)?);
        }
        Op::ScatterAddRows(indices) => {
            push(&parents[0], adj.gather_rows(indices.as_ref().clone())?);
        }
        Op::GatherElems(coords) => {
            let (r, c) = (parents[0].shape()[0], parents[0].shape()[1]);
            push(
                &parents[0],
                adj.scatter_add_elems(coords.as_ref().clone(), r, c)?,
            );
        }
        Op::ScatterAddElems(coords) => {
            push(&parents[0], adj.gather_elems(coords.as_ref().clone())?);
        }
        Op::MaxAxis(axis) => {
            // One-hot argmax mask, first maximal index at ties. The mask is
            // a constant: the subgradient treats the argmax as fixed.
            let x = &parents[0];
            let mask = Var::constant(x.value().argmax_mask_axis(*axis)?);
            let expanded = adj.broadcast_axis(*axis, x.shape()[*axis])?;
            push(x, expanded.mul(&mask)?);
        }
        Op::MaxAll1d => {
            let x = &parents[0];
            let mask = Var::constant(x.value().argmax_mask_1d()?);
            let expanded = adj.broadcast_scalar(x.shape().to_vec())?;
            push(x, expanded.mul(&mask)?);
        }
    }
    Ok(out)
}

/// Reverse-mode gradients of a rank-0 `root` with respect to each node in
/// `wrt`. Nodes the root does not depend on are absent from the map (their
/// gradient is zero). The returned gradients are differentiable nodes.
pub fn grad(root: &Var, wrt: &[Var]) -> Result<GradientMap> {
    if !root.value().is_scalar() {
        return Err(Error::NonScalarRoot {
            shape: root.shape().to_vec(),
        });
    }
    let order = topo_order(root);
    let mut adjoints: HashMap<u64, Var> = HashMap::new();
    adjoints.insert(root.id(), Var::scalar(root.dtype(), 1.0));
    for v in order.iter().rev() {
        let Some(adj) = adjoints.get(&v.id()).cloned() else {
            continue;
        };
        for (pid, contrib) in parent_contributions(v, &adj)? {
            match adjoints.remove(&pid) {
                Some(existing) => {
                    adjoints.insert(pid, existing.add(&contrib)?);
                }
                None => {
                    adjoints.insert(pid, contrib);
                }
            }
        }
    }
    let keep: HashSet<u64> = wrt.iter().map(|v| v.id()).collect();
    adjoints.retain(|id, _| keep.contains(id));
    Ok(GradientMap { adjoints })
}
