//! Reverse-mode automatic differentiation over a flat tape.
//!
//! The tape is rebuilt every step: recording an operation computes its value
//! eagerly and stores the inputs needed for the backward sweep. Gradients flow
//! only through nodes reachable from registered parameters, and the backward
//! walk is a single reverse pass over node indices, so two backward calls over
//! the same tape produce bitwise-identical results.
//!
//! The primitive set is exactly what the flow layers need: matmul,
//! elementwise arithmetic, exp/log/sigmoid, axis reductions, broadcast,
//! permute+reshape, slice/concat, sign-log-determinant (saving the LU factors
//! from the forward pass), and small-matrix inverse. Anything else must be
//! composed from these.

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::{concat_axis, sigmoid_stable, Tensor};
use crate::Real;

/// Handle to a parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of trainable tensors. Layers hold `ParamId`s;
/// the optimizer walks the store; tapes copy values out of it when built.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.names.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::Shape(format!(
                "parameter {} has shape {:?}, refusing to set {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

struct SavedLu {
    lu: Vec<Real>,
    piv: Vec<usize>,
    n: usize,
}

enum Op {
    Leaf,
    Param(ParamId),
    Matmul,
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Ln,
    Sigmoid,
    Sum { axes: Vec<usize> },
    Mean { axes: Vec<usize> },
    Broadcast,
    ReshapePermute { perm: Vec<usize> },
    Slice { axis: usize, start: usize },
    Concat { axis: usize },
    SlogDet,
    InverseSmall,
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    needs_grad: bool,
    saved: Option<SavedLu>,
}

/// Gradients of one scalar loss with respect to the parameters registered on
/// the tape. Every registered parameter has an entry; parameters the loss
/// never touches get explicit zeros.
#[derive(Debug)]
pub struct Gradients {
    entries: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(pid, _)| *pid == id)
            .map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.entries.iter().map(|(id, g)| (*id, g))
    }

    /// Euclidean norm over all entries (the "gradnorm" in training logs).
    pub fn global_norm(&self) -> Real {
        let mut acc: Real = 0.0;
        for (_, g) in &self.entries {
            for v in g.data() {
                acc += v * v;
            }
        }
        acc.sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, g)| g.all_finite())
    }

    /// Name of some parameter with a non-finite gradient, if any.
    pub fn first_non_finite(&self, store: &ParamStore) -> Option<String> {
        self.entries
            .iter()
            .find(|(_, g)| !g.all_finite())
            .map(|(id, _)| store.name(*id).to_string())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, NodeId)>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, saved: Option<SavedLu>) -> NodeId {
        let needs_grad = match op {
            Op::Param(_) => true,
            Op::Leaf => false,
            _ => inputs.iter().any(|id| self.nodes[id.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
            saved,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input: no gradient flows into it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, Vec::new(), value, None)
    }

    pub fn scalar(&mut self, v: Real) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    /// Parameter input: copies the current store value onto the tape and
    /// registers the node for gradient collection. Repeated calls with the
    /// same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some((_, nid)) = self.params.iter().find(|(pid, _)| *pid == id) {
            return *nid;
        }
        let nid = self.push(Op::Param(id), Vec::new(), store.get(id).clone(), None);
        self.params.push((id, nid));
        nid
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = crate::tensor::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        Ok(self.push(Op::Matmul, vec![a, b], v, None))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.add(&self.nodes[b.0].value)?;
        Ok(self.push(Op::Add, vec![a, b], v, None))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.sub(&self.nodes[b.0].value)?;
        Ok(self.push(Op::Sub, vec![a, b], v, None))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.mul(&self.nodes[b.0].value)?;
        Ok(self.push(Op::Mul, vec![a, b], v, None))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.div(&self.nodes[b.0].value)?;
        Ok(self.push(Op::Div, vec![a, b], v, None))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.map(Real::exp);
        self.push(Op::Exp, vec![x], v, None)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.map(Real::ln);
        self.push(Op::Ln, vec![x], v, None)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.map(sigmoid_stable);
        self.push(Op::Sigmoid, vec![x], v, None)
    }

    pub fn sum(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let v = self.nodes[x.0].value.sum_axes(axes)?;
        Ok(self.push(
            Op::Sum {
                axes: axes.to_vec(),
            },
            vec![x],
            v,
            None,
        ))
    }

    pub fn mean(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let v = self.nodes[x.0].value.mean_axes(axes)?;
        Ok(self.push(
            Op::Mean {
                axes: axes.to_vec(),
            },
            vec![x],
            v,
            None,
        ))
    }

    pub fn broadcast(&mut self, x: NodeId, target: &[usize]) -> Result<NodeId> {
        let v = self.nodes[x.0].value.broadcast_to(target)?;
        Ok(self.push(Op::Broadcast, vec![x], v, None))
    }

    pub fn reshape_permute(
        &mut self,
        x: NodeId,
        perm: &[usize],
        new_shape: &[usize],
    ) -> Result<NodeId> {
        let v = crate::tensor::reshape_permute(&self.nodes[x.0].value, perm, new_shape)?;
        Ok(self.push(
            Op::ReshapePermute {
                perm: perm.to_vec(),
            },
            vec![x],
            v,
            None,
        ))
    }

    /// Pure reshape (identity permutation).
    pub fn reshape(&mut self, x: NodeId, new_shape: &[usize]) -> Result<NodeId> {
        let perm: Vec<usize> = (0..self.nodes[x.0].value.ndim()).collect();
        self.reshape_permute(x, &perm, new_shape)
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, stop: usize) -> Result<NodeId> {
        let v = self.nodes[x.0].value.slice_axis(axis, start, stop)?;
        Ok(self.push(Op::Slice { axis, start }, vec![x], v, None))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|id| &self.nodes[id.0].value).collect();
        let v = concat_axis(&tensors, axis)?;
        Ok(self.push(Op::Concat { axis }, parts.to_vec(), v, None))
    }

    /// log|det A| of a square matrix node. Returns the (rank-0) log node and
    /// the determinant sign. A singular input is an error at recording time —
    /// the backward rule needs the saved factorization to be invertible.
    pub fn slogdet(&mut self, x: NodeId) -> Result<(NodeId, i8)> {
        let a = &self.nodes[x.0].value;
        if a.ndim() != 2 || a.shape()[0] != a.shape()[1] {
            return Err(Error::Shape(format!(
                "slogdet needs a square matrix, got {:?}",
                a.shape()
            )));
        }
        let n = a.shape()[0];
        let mut lu = a.data().to_vec();
        let f = linalg::lu_factor_inplace(&mut lu, n);
        if f.sign == 0 {
            return Err(Error::Singular {
                context: "slogdet".to_string(),
            });
        }
        let mut sign = f.sign;
        let mut logabs: Real = 0.0;
        for i in 0..n {
            let d = lu[i * n + i];
            if d < 0.0 {
                sign = -sign;
            }
            logabs += d.abs().ln();
        }
        let node = self.push(
            Op::SlogDet,
            vec![x],
            Tensor::scalar(logabs),
            Some(SavedLu { lu, piv: f.piv, n }),
        );
        Ok((node, sign as i8))
    }

    pub fn inverse_small(&mut self, x: NodeId) -> Result<NodeId> {
        let v = crate::tensor::inverse_small(&self.nodes[x.0].value)?;
        Ok(self.push(Op::InverseSmall, vec![x], v, None))
    }

    // ---- composite conveniences (no new primitives) ----

    /// `alpha * x` via a broadcast constant.
    pub fn scale(&mut self, x: NodeId, alpha: Real) -> Result<NodeId> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        let c = self.scalar(alpha);
        let c = self.broadcast(c, &shape)?;
        self.mul(x, c)
    }

    /// `x + alpha` via a broadcast constant.
    pub fn add_scalar(&mut self, x: NodeId, alpha: Real) -> Result<NodeId> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        let c = self.scalar(alpha);
        let c = self.broadcast(c, &shape)?;
        self.add(x, c)
    }

    /// Backward sweep from a scalar loss node. Returns one gradient entry per
    /// registered parameter (zeros when the loss does not reach it).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(loss_node.value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    // Terminal; stash back for collection below.
                    grads[i] = Some(g);
                }
                Op::Matmul => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    if self.nodes[a.0].needs_grad {
                        let bt = self.nodes[b.0].value.permuted(&[1, 0])?;
                        let ga = crate::tensor::matmul(&g, &bt)?;
                        accumulate(&mut grads, a, ga)?;
                    }
                    if self.nodes[b.0].needs_grad {
                        let at = self.nodes[a.0].value.permuted(&[1, 0])?;
                        let gb = crate::tensor::matmul(&at, &g)?;
                        accumulate(&mut grads, b, gb)?;
                    }
                }
                Op::Add => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut grads, a, g.clone())?;
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut grads, b, g)?;
                    }
                }
                Op::Sub => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut grads, a, g.clone())?;
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut grads, b, g.scale(-1.0))?;
                    }
                }
                Op::Mul => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut grads, a, g.mul(&self.nodes[b.0].value)?)?;
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut grads, b, g.mul(&self.nodes[a.0].value)?)?;
                    }
                }
                Op::Div => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let bv = &self.nodes[b.0].value;
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut grads, a, g.div(bv)?)?;
                    }
                    if self.nodes[b.0].needs_grad {
                        let av = &self.nodes[a.0].value;
                        let gb = g.mul(av)?.div(bv)?.div(bv)?.scale(-1.0);
                        accumulate(&mut grads, b, gb)?;
                    }
                }
                Op::Exp => {
                    let gx = g.mul(&node.value)?;
                    accumulate(&mut grads, node.inputs[0], gx)?;
                }
                Op::Ln => {
                    let gx = g.div(&self.nodes[node.inputs[0].0].value)?;
                    accumulate(&mut grads, node.inputs[0], gx)?;
                }
                Op::Sigmoid => {
                    let y = &node.value;
                    let gx = g.mul(&y.zip_map(y, |s, _| s * (1.0 - s))?)?;
                    accumulate(&mut grads, node.inputs[0], gx)?;
                }
                Op::Sum { axes } => {
                    let in_shape = self.nodes[node.inputs[0].0].value.shape().to_vec();
                    let mut keep = in_shape.clone();
                    for &ax in axes {
                        keep[ax] = 1;
                    }
                    let gx = g.reshaped(&keep)?.broadcast_to(&in_shape)?;
                    accumulate(&mut grads, node.inputs[0], gx)?;
                }
                Op::Mean { axes } => {
                    let in_shape = self.nodes[node.inputs[0].0].value.shape().to_vec();
                    let mut keep = in_shape.clone();
                    let mut count = 1usize;
                    for &ax in axes {
                        count *= in_shape[ax];
                        keep[ax] = 1;
                    }
                    let gx = g
                        .reshaped(&keep)?
                        .broadcast_to(&in_shape)?
                        .scale(1.0 / count as Real);
                    accumulate(&mut grads, node.inputs[0], gx)?;
                }
                Op::Broadcast => {
                    let in_shape = self.nodes[node.inputs[0].0].value.shape().to_vec();
                    let gx = if in_shape.is_empty() {
                        Tensor::scalar(g.sum_all())
                    } else {
                        let axes: Vec<usize> = (0..in_shape.len())
                            .filter(|&ax| in_shape[ax] == 1 && g.shape()[ax] != 1)
                            .collect();
                        g.sum_axes(&axes)?.reshaped(&in_shape)?
                    };
                    accumulate(&mut grads, node.inputs[0], gx)?;
                }
                Op::ReshapePermute { perm } => {
                    let input = &self.nodes[node.inputs[0].0].value;
                    let permuted_shape: Vec<usize> =
                        perm.iter().map(|&p| input.shape()[p]).collect();
                    let mut inv = vec![0usize; perm.len()];
                    for (q, &p) in perm.iter().enumerate() {
                        inv[p] = q;
                    }
                    let gx = g.reshaped(&permuted_shape)?.permuted(&inv)?;
                    accumulate(&mut grads, node.inputs[0], gx)?;
                }
                Op::Slice { axis, start } => {
                    let input = &self.nodes[node.inputs[0].0].value;
                    let mut gx = Tensor::zeros(input.shape());
                    gx.add_slice_axis(*axis, *start, &g);
                    accumulate(&mut grads, node.inputs[0], gx)?;
                }
                Op::Concat { axis } => {
                    let mut off = 0usize;
                    for &inp in &node.inputs {
                        let width = self.nodes[inp.0].value.shape()[*axis];
                        if self.nodes[inp.0].needs_grad {
                            let gx = g.slice_axis(*axis, off, off + width)?;
                            accumulate(&mut grads, inp, gx)?;
                        }
                        off += width;
                    }
                }
                Op::SlogDet => {
                    let saved = node.saved.as_ref().expect("slogdet saves its factors");
                    let inv = linalg::invert_from_lu(&saved.lu, &saved.piv, saved.n)?;
                    let inv_t = linalg::transpose(&inv, saved.n, saved.n);
                    let gscale = g.data()[0];
                    let gx = Tensor::new(vec![saved.n, saved.n], inv_t)?.scale(gscale);
                    accumulate(&mut grads, node.inputs[0], gx)?;
                }
                Op::InverseSmall => {
                    // d(A^{-1}) rule: grad_A = -Y^T g Y^T with Y = A^{-1}.
                    let yt = node.value.permuted(&[1, 0])?;
                    let gx = crate::tensor::matmul(&crate::tensor::matmul(&yt, &g)?, &yt)?
                        .scale(-1.0);
                    accumulate(&mut grads, node.inputs[0], gx)?;
                }
            }
        }

        let entries = self
            .params
            .iter()
            .map(|(pid, nid)| {
                debug_assert!(matches!(self.nodes[nid.0].op, Op::Param(p) if p == *pid));
                let g = if nid.0 <= loss.0 {
                    grads[nid.0].take()
                } else {
                    None
                };
                let g = g.unwrap_or_else(|| Tensor::zeros(self.nodes[nid.0].value.shape()));
                (*pid, g)
            })
            .collect();
        Ok(Gradients { entries })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => {
            *existing = existing.add(&g)?;
        }
        slot @ None => {
            *slot = Some(g);
        }
    }
    Ok(())
}

/// One row of a [`GradCheckReport`].
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_abs_err: Real,
    pub max_rel_err: Real,
}

/// Outcome of comparing tape gradients against central differences.
#[derive(Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: Real,
    pub tol: Real,
    pub pass: bool,
}

/// Compare analytic gradients with central differences for every coordinate
/// of the listed parameters.
///
/// `f` must be a deterministic function of the store contents: it is called
/// once to record the tape for the analytic side and twice per scalar
/// coordinate for the numeric side. Relative error uses a small floor in the
/// denominator so zero-gradient coordinates compare by absolute error.
pub fn check_gradients<F>(
    store: &ParamStore,
    ids: &[ParamId],
    f: F,
    step: Real,
    tol: Real,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    let grads = tape.backward(loss)?;

    let mut work = store.clone();
    let mut entries = Vec::with_capacity(ids.len());
    let mut overall: Real = 0.0;
    for &id in ids {
        let analytic = grads.get(id).cloned().unwrap_or_else(|| {
            Tensor::zeros(store.get(id).shape())
        });
        if !analytic.all_finite() {
            return Err(Error::NonFinite(format!(
                "analytic gradient of {}",
                store.name(id)
            )));
        }
        let mut max_abs: Real = 0.0;
        let mut max_rel: Real = 0.0;
        let n = store.get(id).len();
        for k in 0..n {
            let orig = store.get(id).data()[k];
            let eval = |w: &mut ParamStore, v: Real| -> Result<Real> {
                w.values[id.0].data_mut()[k] = v;
                let mut t = Tape::new();
                let l = f(w, &mut t)?;
                t.value(l).item()
            };
            let plus = eval(&mut work, orig + step)?;
            let minus = eval(&mut work, orig - step)?;
            work.values[id.0].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            if !numeric.is_finite() {
                return Err(Error::NonFinite(format!(
                    "numeric gradient of {}[{k}]",
                    store.name(id)
                )));
            }
            let a = analytic.data()[k];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-6);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
        overall = overall.max(max_rel);
        entries.push(GradCheckEntry {
            name: store.name(id).to_string(),
            max_abs_err: max_abs,
            max_rel_err: max_rel,
        });
    }
    Ok(GradCheckReport {
        entries,
        max_rel_err: overall,
        tol,
        pass: overall < tol,
    })
}
