//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass in execution
//! order. Values are computed eagerly; each node keeps whatever context its
//! backward rule needs. [`Graph::backward`] consumes the graph and sweeps
//! the tape once in reverse, so node order is a valid topological order by
//! construction.
//!
//! Parameters enter through [`Graph::param`]. Binding a parameter once and
//! feeding the resulting [`Var`] to several operations is how weights are
//! shared: the leaf's gradient is the sum of every positional contribution.
//! [`Graph::detach`] cuts that flow for one use site, which is what the
//! stage-isolation checks rely on.

mod concat;
mod conv;
mod elementwise;
pub mod gradcheck;
mod linear;
mod norm;
mod pool;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::param::{ParamId, ParamStore, RunningStats, StatsId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use norm::BN_EPS;
pub use pool::PoolMode;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Batch statistics observed by a train-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentUpdate<T> {
    pub stats: StatsId,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub(crate) enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d { input: Var, kernel: Var, stride: usize, pad: usize },
    Pool { input: Var, ctx: pool::PoolCtx },
    BatchNorm { input: Var, gamma: Var, beta: Var, ctx: norm::BnCtx<T> },
    Dense { input: Var, weight: Var, bias: Var },
    Activation { input: Var, act: Activation },
    Concat { inputs: Vec<Var> },
    Dropout { input: Var, mask: Vec<T> },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    ChannelScale { input: Var, scale: Var },
    Reshape { input: Var },
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::Pool { input, .. }
            | Op::Activation { input, .. }
            | Op::Dropout { input, .. }
            | Op::Reshape { input }
            | Op::Sum(input) => vec![*input],
            Op::BatchNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Op::Dense { input, weight, bias } => vec![*input, *weight, *bias],
            Op::Concat { inputs } => inputs.clone(),
            Op::SoftmaxCe { logits, .. } => vec![*logits],
            Op::ChannelScale { input, scale } => vec![*input, *scale],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// One forward recording.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    moments: Vec<MomentUpdate<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), moments: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            other => other.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// A free leaf that receives a gradient (used by gradient checks).
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Binds a registered parameter as a leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// A copy of `v`'s value that is cut from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(value, Op::Leaf)
    }

    /// Batch moments recorded by train-mode batch norms, in execution order.
    pub fn moments(&self) -> &[MomentUpdate<T>] {
        &self.moments
    }

    pub fn take_moments(&mut self) -> Vec<MomentUpdate<T>> {
        core::mem::take(&mut self.moments)
    }

    /// Cross-correlation (no kernel flip, no bias).
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = conv::forward(self.value(input), self.value(kernel), stride, pad)?;
        Ok(self.push(out, Op::Conv2d { input, kernel, stride, pad }))
    }

    pub fn pool(&mut self, input: Var, mode: PoolMode, window: usize, stride: usize, pad: usize) -> Result<Var> {
        let (out, ctx) = pool::forward(self.value(input), mode, window, stride, pad)?;
        Ok(self.push(out, Op::Pool { input, ctx }))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        self.pool(input, PoolMode::GlobalAvg, 0, 0, 0)
    }

    /// Per-channel batch normalization over N, H, W. In train mode the
    /// batch moments are recorded for a later [`ParamStore::apply_moments`].
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats_id: StatsId,
        running: &RunningStats<T>,
        mode: Mode,
    ) -> Result<Var> {
        let (out, ctx, moments) =
            norm::forward(self.value(input), self.value(gamma), self.value(beta), running, mode)?;
        if let Some((mean, var)) = moments {
            self.moments.push(MomentUpdate { stats: stats_id, mean, var });
        }
        Ok(self.push(out, Op::BatchNorm { input, gamma, beta, ctx }))
    }

    /// `input (N x C) * weight (C x O) + bias (O)`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = linear::dense_forward(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(out, Op::Dense { input, weight, bias }))
    }

    pub fn pointwise(&mut self, input: Var, act: Activation) -> Var {
        let out = elementwise::activate(self.value(input), act);
        self.push(out, Op::Activation { input, act })
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.pointwise(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.pointwise(input, Activation::Sigmoid)
    }

    /// Concatenates along axis 1 (channels for NCHW, input channels for OIHW).
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(dim_err("concat_channels", "empty input list"));
        }
        if inputs.len() == 1 {
            return Ok(inputs[0]);
        }
        let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = concat::forward(&values)?;
        Ok(self.push(out, Op::Concat { inputs: inputs.to_vec() }))
    }

    /// Inverted dropout. Identity in eval mode or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Input(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(input);
        }
        let (out, mask) = elementwise::dropout(self.value(input), rate, rng);
        Ok(self.push(out, Op::Dropout { input, mask }))
    }

    /// Mean softmax cross-entropy of `logits (N x K)` against `labels`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = linear::softmax_ce_forward(self.value(logits), labels)?;
        Ok(self.push(loss, Op::SoftmaxCe { logits, labels: labels.to_vec(), probs }))
    }

    /// `out[n, c, h, w] = input[n, c, h, w] * scale[n, c]`.
    pub fn channel_scale(&mut self, input: Var, scale: Var) -> Result<Var> {
        let out = elementwise::channel_scale(self.value(input), self.value(scale))?;
        Ok(self.push(out, Op::ChannelScale { input, scale }))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape { input }))
    }

    /// Flattens everything after the batch axis.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input);
        let n = shape[0];
        let rest = shape[1..].iter().product::<usize>().max(1);
        self.reshape(input, &[n, rest])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = elementwise::zip(self.value(a), self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = elementwise::zip(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        self.push(out, Op::Sum(input))
    }

    /// Marks every node that `from` depends on.
    pub fn ancestors(&self, from: Var) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        seen[from.0] = true;
        for idx in (0..=from.0).rev() {
            if seen[idx] {
                for v in self.nodes[idx].op.inputs() {
                    seen[v.0] = true;
                }
            }
        }
        seen
    }

    /// Parameters that `from` depends on, ordered and deduplicated.
    pub fn reachable_params(&self, from: Var) -> Vec<ParamId> {
        let seen = self.ancestors(from);
        let mut ids: Vec<ParamId> = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) if seen[i] => Some(id),
                _ => None,
            })
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Multiply-accumulates executed by the recorded conv and dense nodes.
    pub fn multiply_accumulates(&self) -> u64 {
        self.nodes
            .iter()
            .map(|n| match n.op {
                Op::Conv2d { kernel, .. } => {
                    let k = self.nodes[kernel.0].value.shape();
                    (n.value.numel() * k[1] * k[2] * k[3]) as u64
                }
                Op::Dense { weight, .. } => (n.value.numel() * self.nodes[weight.0].value.shape()[0]) as u64,
                _ => 0,
            })
            .sum()
    }
    /// Hash of every piecewise switch in the recording: the sign of each ReLU
    /// input and each max-pool winner. Two recordings of the same program
    /// with equal patterns lie on the same smooth piece.
    pub fn switch_pattern(&self) -> u64 {
        const PRIME: u64 = 0x100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| h = (h ^ v).wrapping_mul(PRIME);
        for node in &self.nodes {
            match &node.op {
                Op::Activation { input, act: Activation::Relu } => {
                    for &x in self.nodes[input.0].value.data() {
                        mix((x > T::zero()) as u64);
                    }
                }
                Op::Pool { ctx: pool::PoolCtx::Argmax(idx), .. } => idx.iter().for_each(|&i| mix(i as u64)),
                _ => {}
            }
        }
        h
    }


    /// Sweeps the tape in reverse from a scalar `loss`.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let contribs = self.input_grads(node, &g)?;
            for (v, delta) in contribs {
                if self.nodes[v.0].requires_grad {
                    accumulate(&mut grads[v.0], delta);
                }
            }
            grads[idx] = Some(g);
        }

        let mut params = Vec::new();
        let mut out = Vec::with_capacity(self.nodes.len());
        for (i, (node, g)) in self.nodes.into_iter().zip(grads).enumerate() {
            let mut g = g;
            if let Op::Param(id) = node.op {
                params.push((Var(i), id));
                if g.is_none() {
                    g = Some(vec![T::zero(); node.value.numel()]);
                }
            }
            let shape = node.value.shape().to_vec();
            out.push(g.map(|data| Tensor::new(&shape, data).expect("gradient shape")));
        }
        Ok(Gradients { grads: out, params })
    }

    fn input_grads(&self, node: &Node<T>, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        Ok(match &node.op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Conv2d { input, kernel, stride, pad } => {
                let (dx, dk) =
                    conv::backward(val(input), val(kernel), g, *stride, *pad, needs(input), needs(kernel));
                let mut v = Vec::new();
                if let Some(dx) = dx {
                    v.push((*input, dx));
                }
                if let Some(dk) = dk {
                    v.push((*kernel, dk));
                }
                v
            }
            Op::Pool { input, ctx } => vec![(*input, pool::backward(val(input), ctx, g))],
            Op::BatchNorm { input, gamma, beta, ctx } => {
                let (dx, dgamma, dbeta) = norm::backward(val(input), val(gamma), ctx, g);
                vec![(*input, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Dense { input, weight, bias } => {
                let (dx, dw, db) = linear::dense_backward(val(input), val(weight), g);
                vec![(*input, dx), (*weight, dw), (*bias, db)]
            }
            Op::Activation { input, act } => {
                vec![(*input, elementwise::activate_backward(val(input), &node.value, *act, g))]
            }
            Op::Concat { inputs } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(val).collect();
                inputs.iter().copied().zip(concat::backward(&values, g)).collect()
            }
            Op::Dropout { input, mask } => {
                vec![(*input, g.iter().zip(mask).map(|(&a, &m)| a * m).collect())]
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                vec![(*logits, linear::softmax_ce_backward(probs, labels, g[0]))]
            }
            Op::ChannelScale { input, scale } => {
                let (dx, ds) = elementwise::channel_scale_backward(val(input), val(scale), g);
                vec![(*input, dx), (*scale, ds)]
            }
            Op::Reshape { input } => vec![(*input, g.to_vec())],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul(a, b) => {
                let (va, vb) = (val(a).data(), val(b).data());
                vec![
                    (*a, g.iter().zip(vb).map(|(&d, &y)| d * y).collect()),
                    (*b, g.iter().zip(va).map(|(&d, &x)| d * x).collect()),
                ]
            }
            Op::Sum(input) => vec![(*input, vec![g[0]; val(input).numel()])],
        })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, delta: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => *slot = Some(delta),
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(Var, ParamId)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if any flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Every parameter leaf paired with its gradient; leaves the loss does
    /// not depend on carry zeros.
    pub fn param_leaf_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> + '_ {
        self.params
            .iter()
            .map(move |&(v, id)| (id, self.grads[v.0].as_ref().expect("param leaves always hold a gradient")))
    }

    /// Sum over all leaves bound to `id`.
    pub fn param(&self, id: ParamId) -> Option<Tensor<T>> {
        let mut acc: Option<Tensor<T>> = None;
        for &(v, pid) in &self.params {
            if pid != id {
                continue;
            }
            if let Some(g) = &self.grads[v.0] {
                match &mut acc {
                    Some(a) => {
                        for (x, &d) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += d;
                        }
                    }
                    None => acc = Some(g.clone()),
                }
            }
        }
        acc
    }
}
