//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is a recording context: every operation on a [`Var`] appends a
//! node holding its value and whatever the backward rule needs. Node ids are
//! creation-ordered, so the tape is already topologically sorted and
//! [`Graph::backward`] is a single reverse sweep.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{invalid, Result, TensorError};
use crate::kernels::{self, GroupStats};
use crate::nn::{Param, ParamId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Sigmoid,
    Relu,
    Exp,
    Log,
    Softplus,
    /// Huber loss with unit transition point.
    SmoothL1,
    Clamp(f64, f64),
    Scale(f64),
    AddScalar(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(usize, Unary),
    Binary(usize, usize, Binary),
    MatMul(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    Softmax(usize, usize),
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        stats: GroupStats,
    },
    Resize(usize),
    Reshape(usize),
    TransposeLast2(usize),
    Concat0(Vec<usize>),
    Slice0 {
        x: usize,
        start: usize,
    },
    SumAll(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording context for one forward/backward pass. Not `Sync`; use one
/// graph per thread.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    /// Accumulated leaf gradients, persisted across `backward` calls.
    leaf_grads: RefCell<HashMap<usize, Tensor>>,
    params: RefCell<HashMap<ParamId, usize>>,
    /// Values produced by `stop_gradient`, in call order.
    detached: RefCell<Vec<Rc<Tensor>>>,
    /// When set, the k-th `stop_gradient` yields `frozen[k]` instead of its
    /// input, so a perturbed replay differentiates the same surrogate as backward.
    frozen: Option<Vec<Rc<Tensor>>>,
}

/// Handle to a recorded value.
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph whose detached values are pinned to those of a reference pass.
    pub fn with_frozen_detached(values: Vec<Rc<Tensor>>) -> Self {
        Graph {
            frozen: Some(values),
            ..Self::default()
        }
    }

    /// Outputs of every `stop_gradient` so far, in call order.
    pub fn detached_values(&self) -> Vec<Rc<Tensor>> {
        self.detached.borrow().clone()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Bind a parameter as a leaf; repeated calls return the same node.
    pub fn param(&self, p: &Param) -> Var<'_> {
        if let Some(&id) = self.params.borrow().get(&p.id()) {
            return Var { graph: self, id };
        }
        let v = self.leaf(p.value().clone());
        self.params.borrow_mut().insert(p.id(), v.id);
        v
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Accumulated gradient of a leaf, `None` if it never received any.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        self.leaf_grads.borrow().get(&v.id).cloned()
    }

    /// Accumulated gradient of a bound parameter, `None` if it was not bound
    /// or no gradient reached it.
    pub fn param_grad(&self, id: ParamId) -> Option<Tensor> {
        let node = *self.params.borrow().get(&id)?;
        self.leaf_grads.borrow().get(&node).cloned()
    }

    pub fn zero_grad(&self) {
        self.leaf_grads.borrow_mut().clear();
    }

    /// Reverse sweep from a scalar `loss`; leaf gradients accumulate across calls.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));

        let mut leaf_grads = self.leaf_grads.borrow_mut();
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            let mut send = |target: usize, g: Tensor| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => match leaf_grads.get_mut(&id) {
                    Some(acc) => acc.add_assign(&gy),
                    None => {
                        leaf_grads.insert(id, gy);
                    }
                },
                Op::Unary(x, kind) => {
                    let xv = &nodes[*x].value;
                    let y = &node.value;
                    let gx = unary_backward(*kind, xv, y, &gy);
                    send(*x, gx);
                }
                Op::Binary(a, b, kind) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let (ga, gb) = binary_backward(*kind, av, bv, &gy)?;
                    send(*a, kernels::reduce_to_shape(&ga, av.shape()));
                    send(*b, kernels::reduce_to_shape(&gb, bv.shape()));
                }
                Op::MatMul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    if nodes[*a].requires_grad {
                        send(*a, kernels::matmul(&gy, &kernels::transpose_last2(bv)?)?);
                    }
                    if nodes[*b].requires_grad {
                        send(*b, kernels::matmul(&kernels::transpose_last2(av)?, &gy)?);
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    let (gx, gw, gb) = kernels::conv2d_backward(
                        &nodes[*x].value,
                        &nodes[*w].value,
                        &gy,
                        *stride,
                        *pad,
                    )?;
                    send(*x, gx);
                    send(*w, gw);
                    if let Some(b) = b {
                        send(*b, gb);
                    }
                }
                Op::Softmax(x, axis) => {
                    send(*x, kernels::softmax_backward(&node.value, &gy, *axis));
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    stats,
                } => {
                    let (gx, gg, gb) = kernels::group_norm_backward(
                        &nodes[*x].value,
                        &nodes[*gamma].value,
                        stats,
                        &gy,
                    );
                    send(*x, gx);
                    send(*gamma, gg);
                    send(*beta, gb);
                }
                Op::Resize(x) => {
                    send(
                        *x,
                        kernels::bilinear_resize_backward(nodes[*x].value.shape(), &gy),
                    );
                }
                Op::Reshape(x) => {
                    send(
                        *x,
                        Tensor::from_parts(nodes[*x].value.shape().to_vec(), gy.into_data()),
                    );
                }
                Op::TransposeLast2(x) => send(*x, kernels::transpose_last2(&gy)?),
                Op::Concat0(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let len = nodes[p].value.shape()[0];
                        send(p, kernels::slice0(&gy, start, len)?);
                        start += len;
                    }
                }
                Op::Slice0 { x, start } => {
                    let xv = &nodes[*x].value;
                    let row: usize = xv.shape()[1..].iter().product();
                    let mut g = vec![0.0; xv.len()];
                    g[start * row..start * row + gy.len()].copy_from_slice(gy.data());
                    send(*x, Tensor::from_parts(xv.shape().to_vec(), g));
                }
                Op::SumAll(x) => {
                    send(*x, Tensor::full(nodes[*x].value.shape(), gy.item()));
                }
            }
        }
        Ok(())
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

pub(crate) fn unary_forward(kind: Unary, x: &Tensor) -> Result<Tensor> {
    Ok(match kind {
        Unary::Sigmoid => x.map(sigmoid),
        Unary::Relu => x.map(|v| v.max(0.0)),
        Unary::Exp => x.map(f64::exp),
        Unary::Log => {
            if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                return Err(TensorError::Domain {
                    op: "log",
                    detail: format!("non-positive input {bad}"),
                });
            }
            x.map(f64::ln)
        }
        Unary::Softplus => x.map(softplus),
        Unary::SmoothL1 => x.map(|v| {
            let a = v.abs();
            if a < 1.0 {
                0.5 * v * v
            } else {
                a - 0.5
            }
        }),
        Unary::Clamp(lo, hi) => x.map(|v| v.clamp(lo, hi)),
        Unary::Scale(s) => x.map(|v| v * s),
        Unary::AddScalar(s) => x.map(|v| v + s),
    })
}

fn unary_backward(kind: Unary, x: &Tensor, y: &Tensor, gy: &Tensor) -> Tensor {
    let zip = |f: &dyn Fn(f64, f64, f64) -> f64| {
        Tensor::from_parts(
            x.shape().to_vec(),
            x.data()
                .iter()
                .zip(y.data())
                .zip(gy.data())
                .map(|((&xv, &yv), &g)| f(xv, yv, g))
                .collect(),
        )
    };
    match kind {
        Unary::Sigmoid => zip(&|_, y, g| g * y * (1.0 - y)),
        Unary::Relu => zip(&|x, _, g| if x > 0.0 { g } else { 0.0 }),
        Unary::Exp => zip(&|_, y, g| g * y),
        Unary::Log => zip(&|x, _, g| g / x),
        Unary::Softplus => zip(&|x, _, g| g * sigmoid(x)),
        Unary::SmoothL1 => zip(&|x, _, g| g * x.clamp(-1.0, 1.0)),
        Unary::Clamp(lo, hi) => zip(&|x, _, g| if x >= lo && x <= hi { g } else { 0.0 }),
        Unary::Scale(s) => zip(&|_, _, g| g * s),
        Unary::AddScalar(_) => gy.clone(),
    }
}

fn binary_backward(kind: Binary, a: &Tensor, b: &Tensor, gy: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok(match kind {
        Binary::Add => (gy.clone(), gy.clone()),
        Binary::Sub => (gy.clone(), gy.map(|g| -g)),
        Binary::Mul => (
            kernels::broadcast_binary("mul", gy, b, |g, bv| g * bv)?,
            kernels::broadcast_binary("mul", gy, a, |g, av| g * av)?,
        ),
        Binary::Div => {
            let ga = kernels::broadcast_binary("div", gy, b, |g, bv| g / bv)?;
            let ab = kernels::broadcast_binary("div", a, b, |av, bv| av / (bv * bv))?;
            let gb = kernels::broadcast_binary("div", gy, &ab, |g, q| -g * q)?;
            (ga, gb)
        }
    })
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, kind: Unary) -> Result<Var<'g>> {
        let y = unary_forward(kind, &self.value())?;
        let rg = self.graph.needs(&[self.id]);
        Ok(self.graph.push(y, Op::Unary(self.id, kind), rg))
    }

    fn unary_total(self, kind: Unary) -> Var<'g> {
        self.unary(kind).expect("total unary op")
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary_total(Unary::Sigmoid)
    }

    pub fn relu(self) -> Var<'g> {
        self.unary_total(Unary::Relu)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary_total(Unary::Exp)
    }

    /// Natural log; errors on non-positive entries.
    pub fn log(self) -> Result<Var<'g>> {
        self.unary(Unary::Log)
    }

    pub fn softplus(self) -> Var<'g> {
        self.unary_total(Unary::Softplus)
    }

    pub fn smooth_l1(self) -> Var<'g> {
        self.unary_total(Unary::SmoothL1)
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g> {
        self.unary_total(Unary::Clamp(lo, hi))
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        self.unary_total(Unary::Scale(s))
    }

    pub fn add_scalar(self, s: f64) -> Var<'g> {
        self.unary_total(Unary::AddScalar(s))
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    fn binary(self, other: Var<'g>, kind: Binary) -> Result<Var<'g>> {
        debug_assert!(std::ptr::eq(self.graph, other.graph));
        let (a, b) = (self.value(), other.value());
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let y = kernels::broadcast_binary(name, &a, &b, |x, y| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        })?;
        if kind == Binary::Div && !y.all_finite() {
            return Err(TensorError::NonFinite { op: "div" });
        }
        let rg = self.graph.needs(&[self.id, other.id]);
        Ok(self.graph.push(y, Op::Binary(self.id, other.id, kind), rg))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Binary::Div)
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let y = kernels::matmul(&self.value(), &other.value())?;
        let rg = self.graph.needs(&[self.id, other.id]);
        Ok(self.graph.push(y, Op::MatMul(self.id, other.id), rg))
    }

    pub fn conv2d(
        self,
        w: Var<'g>,
        bias: Option<Var<'g>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'g>> {
        let bv = bias.map(|b| b.value());
        let y = kernels::conv2d(&self.value(), &w.value(), bv.as_deref(), stride, pad)?;
        let mut ids = vec![self.id, w.id];
        ids.extend(bias.map(|b| b.id));
        let rg = self.graph.needs(&ids);
        Ok(self.graph.push(
            y,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                b: bias.map(|b| b.id),
                stride,
                pad,
            },
            rg,
        ))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'g>> {
        let y = kernels::softmax(&self.value(), axis)?;
        let rg = self.graph.needs(&[self.id]);
        Ok(self.graph.push(y, Op::Softmax(self.id, axis), rg))
    }

    pub fn group_norm(
        self,
        groups: usize,
        gamma: Var<'g>,
        beta: Var<'g>,
        eps: f64,
    ) -> Result<Var<'g>> {
        let (y, stats) =
            kernels::group_norm(&self.value(), groups, &gamma.value(), &beta.value(), eps)?;
        let rg = self.graph.needs(&[self.id, gamma.id, beta.id]);
        Ok(self.graph.push(
            y,
            Op::GroupNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                stats,
            },
            rg,
        ))
    }

    pub fn bilinear_resize(self, h: usize, w: usize) -> Result<Var<'g>> {
        let y = kernels::bilinear_resize(&self.value(), h, w)?;
        let rg = self.graph.needs(&[self.id]);
        Ok(self.graph.push(y, Op::Resize(self.id), rg))
    }

    /// Forward identity that severs the gradient path.
    pub fn stop_gradient(self) -> Var<'g> {
        let g = self.graph;
        let k = g.detached.borrow().len();
        let value = match g.frozen.as_ref().and_then(|f| f.get(k)) {
            Some(v) if v.shape() == self.value().shape() => Rc::clone(v),
            _ => self.value(),
        };
        g.detached.borrow_mut().push(Rc::clone(&value));
        g.constant(value.as_ref().clone())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let y = self.value().reshape(shape)?;
        let rg = self.graph.needs(&[self.id]);
        Ok(self.graph.push(y, Op::Reshape(self.id), rg))
    }

    pub fn transpose_last2(self) -> Result<Var<'g>> {
        let y = kernels::transpose_last2(&self.value())?;
        let rg = self.graph.needs(&[self.id]);
        Ok(self.graph.push(y, Op::TransposeLast2(self.id), rg))
    }

    pub fn slice0(self, start: usize, len: usize) -> Result<Var<'g>> {
        let y = kernels::slice0(&self.value(), start, len)?;
        let rg = self.graph.needs(&[self.id]);
        Ok(self.graph.push(y, Op::Slice0 { x: self.id, start }, rg))
    }

    pub fn sum(self) -> Var<'g> {
        let y = Tensor::scalar(self.value().sum());
        let rg = self.graph.needs(&[self.id]);
        self.graph.push(y, Op::SumAll(self.id), rg)
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Scalar value of a single-element var.
    pub fn item(&self) -> f64 {
        self.value().item()
    }
}

/// Concatenate along the leading axis.
pub fn concat0<'g>(parts: &[Var<'g>]) -> Result<Var<'g>> {
    let first = parts
        .first()
        .ok_or_else(|| invalid("concat", "no inputs"))?;
    let g = first.graph;
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
    let y = kernels::concat0(&refs)?;
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let rg = g.needs(&ids);
    Ok(g.push(y, Op::Concat0(ids), rg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_and_sigmoid_grads() {
        let g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let loss = x.mul(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);

        let g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0));
        let y = x.sigmoid();
        assert_eq!(y.item(), 0.5);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 0.25);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let loss = x.mul(x).unwrap();
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 12.0);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn stop_gradient_severs_one_branch() {
        let g = Graph::new();
        let x = g.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let d = x.stop_gradient();
        assert_eq!(*d.value(), *x.value());
        let loss = d.mul(x).unwrap().sum();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), *x.value());
    }

    #[test]
    fn stop_gradient_only_path_gives_no_grad() {
        let g = Graph::new();
        let w = g.leaf(Tensor::scalar(2.0));
        let y = w.exp().stop_gradient();
        let loss = y.scale(3.0).sum();
        assert!(!loss.requires_grad());
        assert!(g.backward(loss).is_ok());
        assert!(g.grad(w).is_none());
    }

    #[test]
    fn log_domain_error() {
        let g = Graph::new();
        let x = g.leaf(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(x.log(), Err(TensorError::Domain { .. })));
        assert!(x.clamp(1e-7, 1.0).log().is_ok());
    }

    #[test]
    fn relu_and_identity_mul() {
        let g = Graph::new();
        assert_eq!(g.scalar(-1.0).relu().item(), 0.0);
        let x = g.constant(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5));
        let ones = g.constant(Tensor::ones(&[2, 3]));
        assert_eq!(*x.mul(ones).unwrap().value(), *x.value());
        let bad = g.constant(Tensor::ones(&[3, 2]));
        let err = x.add(bad).unwrap_err();
        assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[3, 2]"));
    }

    #[test]
    fn shared_param_binds_once() {
        let p = Param::new("p", Tensor::scalar(2.0));
        let g = Graph::new();
        let a = g.param(&p);
        let b = g.param(&p);
        assert_eq!(a.id(), b.id());
        let loss = a.mul(b).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.param_grad(p.id()).unwrap().item(), 4.0);
    }
}
