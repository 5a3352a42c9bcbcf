//! Reverse-mode differentiation over a recorded tape of kernel calls.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, BnCache, ConvGeom};
use crate::tensor::{Scalar, Tensor};

pub type NodeId = usize;

enum Op<S: Scalar> {
    Input,
    Param { slot: usize, name: String },
    Conv { x: NodeId, w: NodeId, b: NodeId, geom: ConvGeom },
    Deconv { x: NodeId, w: NodeId, b: NodeId },
    MaxPool { x: NodeId, arg: Vec<u32> },
    Upsample { x: NodeId, factor: usize },
    BnTrain { x: NodeId, gamma: NodeId, beta: NodeId, cache: BnCache<S> },
    BnEval { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Tensor<S>, running_var: Arc<Tensor<S>> },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Softmax { x: NodeId },
    Concat { xs: Vec<NodeId> },
    Mul { a: NodeId, b: NodeId },
    Reshape { x: NodeId },
    /// Scalar produced outside the tape together with its local gradients.
    Scalar { inputs: Vec<NodeId>, local: Vec<Tensor<S>> },
    WeightedSum { terms: Vec<(NodeId, f64)> },
}

struct Node<S: Scalar> {
    value: Arc<Tensor<S>>,
    op: Op<S>,
    needs_grad: bool,
}

/// Recorded computation. Nodes are appended in evaluation order, so the
/// node index is a topological order.
pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Graph { nodes: Vec::new() }
    }
}

/// Gradient of a parameter leaf, keyed by the store slot it came from.
pub struct ParamGrad<S: Scalar> {
    pub slot: usize,
    pub name: String,
    pub grad: Tensor<S>,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, deps: &[NodeId]) -> NodeId {
        let needs_grad = deps.iter().any(|&d| self.nodes[d].needs_grad);
        self.push_arc(Arc::new(value), op, needs_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor<S>>, op: Op<S>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id].value
    }

    pub fn value_arc(&self, id: NodeId) -> &Arc<Tensor<S>> {
        &self.nodes[id].value
    }

    /// Constant input; no gradient is propagated to it.
    pub fn input(&mut self, t: Tensor<S>) -> NodeId {
        self.push_arc(Arc::new(t), Op::Input, false)
    }

    pub fn param(&mut self, slot: usize, name: &str, value: Arc<Tensor<S>>, trainable: bool) -> NodeId {
        self.push_arc(value, Op::Param { slot, name: name.to_string() }, trainable)
    }

    pub fn conv(&mut self, x: NodeId, w: NodeId, b: NodeId, geom: ConvGeom) -> Result<NodeId> {
        let y = kernels::conv_forward(self.value(x), self.value(w), self.value(b), geom)?;
        Ok(self.push(y, Op::Conv { x, w, b, geom }, &[x, w, b]))
    }

    pub fn deconv(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = kernels::deconv_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Deconv { x, w, b }, &[x, w, b]))
    }

    pub fn max_pool(&mut self, x: NodeId, window: usize) -> Result<NodeId> {
        if window == 1 {
            return Ok(x);
        }
        let (y, arg) = kernels::max_pool_forward(self.value(x), window)?;
        Ok(self.push(y, Op::MaxPool { x, arg }, &[x]))
    }

    pub fn upsample(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        if factor == 1 {
            return Ok(x);
        }
        let y = kernels::upsample_forward(self.value(x), factor)?;
        Ok(self.push(y, Op::Upsample { x, factor }, &[x]))
    }

    /// Training-mode normalization; returns the output node and the batch
    /// statistics `(mean, unbiased variance)` for running estimates.
    pub fn batch_norm_train(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<(NodeId, Vec<S>, Vec<S>)> {
        let (y, cache) = kernels::batch_norm_train(self.value(x), self.value(gamma), self.value(beta))?;
        let (mean, var) = (cache.mean.clone(), cache.var_unbiased.clone());
        Ok((self.push(y, Op::BnTrain { x, gamma, beta, cache }, &[x, gamma, beta]), mean, var))
    }

    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Tensor<S>,
        running_var: Arc<Tensor<S>>,
    ) -> Result<NodeId> {
        let (y, xhat) =
            kernels::batch_norm_eval(self.value(x), self.value(gamma), self.value(beta), running_mean, &running_var)?;
        Ok(self.push(y, Op::BnEval { x, gamma, beta, xhat, running_var }, &[x, gamma, beta]))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = kernels::relu(self.value(x));
        self.push(y, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = kernels::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid { x }, &[x])
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let y = kernels::softmax_channels(self.value(x));
        self.push(y, Op::Softmax { x }, &[x])
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        let vals: Vec<&Tensor<S>> = xs.iter().map(|&i| self.value(i)).collect();
        let y = kernels::concat_forward(&vals)?;
        Ok(self.push(y, Op::Concat { xs: xs.to_vec() }, xs))
    }

    /// Element-wise product of equally shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        Ok(self.push(y, Op::Mul { a, b }, &[a, b]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape { x }, &[x]))
    }

    /// Records a scalar computed elsewhere, with `local[k]` the gradient of
    /// the scalar with respect to `inputs[k]`.
    pub fn scalar(&mut self, value: S, inputs: &[NodeId], local: Vec<Tensor<S>>) -> Result<NodeId> {
        if inputs.len() != local.len() {
            return Err(Error::Contract("one local gradient is required per scalar input".into()));
        }
        for (&i, g) in inputs.iter().zip(&local) {
            if self.value(i).shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "local gradient {:?} does not match input {:?}",
                    g.shape(),
                    self.value(i).shape()
                )));
            }
        }
        Ok(self.push(Tensor::scalar(value), Op::Scalar { inputs: inputs.to_vec(), local }, inputs))
    }

    /// `sum_k w_k * x_k` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut acc = 0.0;
        for &(i, w) in terms {
            if self.value(i).numel() != 1 {
                return Err(Error::Shape("weighted sums take scalar terms".into()));
            }
            acc += w * self.value(i).data()[0].to_f64();
        }
        let deps: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(Tensor::scalar(S::from_f64(acc)), Op::WeightedSum { terms: terms.to_vec() }, &deps))
    }

    /// Back-propagates from a scalar root and returns the gradients of all
    /// trainable parameter leaves.
    pub fn backward(&self, root: NodeId) -> Result<Vec<ParamGrad<S>>> {
        if self.value(root).numel() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar root, got {:?}", self.value(root).shape())));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(Tensor::full(self.value(root).shape(), S::one()));
        let mut out = Vec::new();
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let mut send = |to: NodeId, t: Tensor<S>| {
                if !self.nodes[to].needs_grad {
                    return;
                }
                match &mut grads[to] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param { slot, name } => out.push(ParamGrad { slot: *slot, name: name.clone(), grad: g }),
                Op::Conv { x, w, b, geom } => {
                    let (dx, dw, db) = kernels::conv_backward(self.value(*x), self.value(*w), *geom, &g)?;
                    send(*x, dx);
                    send(*w, dw);
                    send(*b, db);
                }
                Op::Deconv { x, w, b } => {
                    let (dx, dw, db) = kernels::deconv_backward(self.value(*x), self.value(*w), &g)?;
                    send(*x, dx);
                    send(*w, dw);
                    send(*b, db);
                }
                Op::MaxPool { x, arg } => send(*x, kernels::max_pool_backward(self.value(*x).shape(), arg, &g)),
                Op::Upsample { x, factor } => send(*x, kernels::upsample_backward(self.value(*x).shape(), *factor, &g)?),
                Op::BnTrain { x, gamma, beta, cache } => {
                    let (dx, dg, db) = kernels::batch_norm_train_backward(cache, self.value(*gamma), &g);
                    send(*x, dx);
                    send(*gamma, dg);
                    send(*beta, db);
                }
                Op::BnEval { x, gamma, beta, xhat, running_var } => {
                    let (dx, dg, db) = kernels::batch_norm_eval_backward(xhat, self.value(*gamma), running_var, &g);
                    send(*x, dx);
                    send(*gamma, dg);
                    send(*beta, db);
                }
                Op::Relu { x } => send(*x, kernels::relu_backward(&node.value, &g)),
                Op::Sigmoid { x } => send(*x, kernels::sigmoid_backward(&node.value, &g)),
                Op::Softmax { x } => send(*x, kernels::softmax_channels_backward(&node.value, &g)),
                Op::Concat { xs } => {
                    let shapes: Vec<Vec<usize>> = xs.iter().map(|&i| self.value(i).shape().to_vec()).collect();
                    for (&i, part) in xs.iter().zip(kernels::concat_backward(&shapes, &g)) {
                        send(i, part);
                    }
                }
                Op::Mul { a, b } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    send(*a, g.zip_map(vb, |p, q| p * q)?);
                    send(*b, g.zip_map(va, |p, q| p * q)?);
                }
                Op::Reshape { x } => send(*x, g.reshape(self.value(*x).shape())?),
                Op::Scalar { inputs, local } => {
                    let s = g.data()[0];
                    for (&i, l) in inputs.iter().zip(local) {
                        send(i, l.map(|v| v * s));
                    }
                }
                Op::WeightedSum { terms } => {
                    let s = g.data()[0];
                    for &(i, w) in terms {
                        send(i, Tensor::scalar(s * S::from_f64(w)));
                    }
                }
            }
        }
        out.reverse();
        Ok(out)
    }
}
