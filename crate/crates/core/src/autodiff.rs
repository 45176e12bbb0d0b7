//! Reverse-mode automatic differentiation over an arena tape.
//!
//! Values are appended to the tape in evaluation order, so node indices are
//! already a topological order and the reverse sweep is a simple backwards
//! walk. Nodes that do not depend on any gradient-requiring leaf skip their
//! backward kernels entirely.

use crate::error::{Error, Result};
use crate::ops::{self, Padding};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: Padding,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
        k: usize,
    },
    Concat(Var, Var),
    Modulate {
        r: Var,
        gamma: Var,
        beta: Var,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    Sum(Var),
    Mul(Var, Var),
    AddScalar(Var),
    SliceCols {
        input: Var,
        start: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op,
}

/// Records a forward computation and replays it backwards.
///
/// A tape supports exactly one [`Tape::backward`] call; gradients are
/// accumulated once per recorded forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    strict_numerics: bool,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// New tape; non-finite checks follow the build's debug assertions.
    pub fn new() -> Self {
        Self::with_strict_numerics(cfg!(debug_assertions))
    }

    /// When `strict` is set every recorded value is checked for NaN/Inf.
    pub fn with_strict_numerics(strict: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            strict_numerics: strict,
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op, name: &'static str) -> Result<Var> {
        if self.strict_numerics && !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        self.backward_done = false;
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, requires_grad, Op::Leaf, "leaf")
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the loss w.r.t. `v`, available after [`Tape::backward`].
    /// Returns `None` for values that do not require gradients; values that
    /// require gradients but are disconnected from the loss get zeros.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: Padding) -> Result<Var> {
        let out = ops::conv2d(self.value(input), self.value(weight), self.value(bias), stride, padding)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        self.push(
            out,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            "conv2d",
        )
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::dense(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        self.push(out, rg, Op::Dense { input, weight, bias }, "dense")
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = ops::relu(self.value(input));
        let rg = self.rg(input);
        self.push(out, rg, Op::Relu(input), "relu")
    }

    pub fn maxpool2d(&mut self, input: Var, k: usize) -> Result<Var> {
        let (out, argmax) = ops::maxpool2d(self.value(input), k)?;
        let rg = self.rg(input);
        self.push(out, rg, Op::MaxPool { input, argmax }, "maxpool2d")
    }

    pub fn upsample_nearest(&mut self, input: Var, k: usize) -> Result<Var> {
        let out = ops::upsample_nearest(self.value(input), k)?;
        let rg = self.rg(input);
        self.push(out, rg, Op::Upsample { input, k }, "upsample_nearest")
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, rg, Op::Concat(a, b), "concat_channels")
    }

    pub fn affine_modulate(&mut self, r: Var, gamma: Var, beta: Var) -> Result<Var> {
        let out = ops::affine_modulate(self.value(r), self.value(gamma), self.value(beta))?;
        let rg = self.rg(r) || self.rg(gamma) || self.rg(beta);
        self.push(out, rg, Op::Modulate { r, gamma, beta }, "affine_modulate")
    }

    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let out = ops::mse_loss(self.value(pred), self.value(target))?;
        let rg = self.rg(pred) || self.rg(target);
        self.push(out, rg, Op::Mse { pred, target }, "mse_loss")
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total = self.value(input).data().iter().fold(T::zero(), |a, &b| a + b);
        let rg = self.rg(input);
        self.push(Tensor::scalar(total), rg, Op::Sum(input), "sum")
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, rg, Op::Mul(a, b), "mul")
    }

    pub fn add_scalar(&mut self, input: Var, c: T) -> Result<Var> {
        let out = self.value(input).map(|v| v + c);
        let rg = self.rg(input);
        self.push(out, rg, Op::AddScalar(input), "add_scalar")
    }

    pub fn slice_cols(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let out = ops::slice_cols(self.value(input), start, len)?;
        let rg = self.rg(input);
        self.push(out, rg, Op::SliceCols { input, start }, "slice_cols")
    }

    /// Propagates gradients from the scalar `loss` to every reachable value.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardConsumed);
        }
        let loss_shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::ones(&loss_shape));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(upstream) = self.grads[idx].take() else {
                continue;
            };
            let contributions = self.backward_node(idx, &upstream)?;
            self.grads[idx] = Some(upstream);
            for (var, g) in contributions {
                accumulate(&mut self.grads[var.0], g)?;
            }
        }
        // Disconnected gradient-requiring values get explicit zeros.
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if node.requires_grad && grad.is_none() {
                *grad = Some(Tensor::zeros(node.value.shape()));
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn backward_node(&self, idx: usize, upstream: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let mut out = Vec::new();
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let need = [self.rg(input), self.rg(weight), self.rg(bias)];
                let g = ops::conv2d_backward(self.value(input), self.value(weight), upstream, stride, padding, need)?;
                push_some(&mut out, input, g.input);
                push_some(&mut out, weight, g.weight);
                push_some(&mut out, bias, g.bias);
            }
            &Op::Dense { input, weight, bias } => {
                let need = [self.rg(input), self.rg(weight), self.rg(bias)];
                let g = ops::dense_backward(self.value(input), self.value(weight), upstream, need)?;
                push_some(&mut out, input, g.input);
                push_some(&mut out, weight, g.weight);
                push_some(&mut out, bias, g.bias);
            }
            &Op::Relu(input) => {
                out.push((input, ops::relu_backward(&node.value, upstream)?));
            }
            Op::MaxPool { input, argmax } => {
                let dx = ops::maxpool2d_backward(self.value(*input).shape(), argmax, upstream)?;
                out.push((*input, dx));
            }
            &Op::Upsample { input, k } => {
                let dx = ops::upsample_nearest_backward(self.value(input).shape(), k, upstream)?;
                out.push((input, dx));
            }
            &Op::Concat(a, b) => {
                let (da, db) = ops::concat_channels_backward(self.value(a).shape(), self.value(b).shape(), upstream)?;
                if self.rg(a) {
                    out.push((a, da));
                }
                if self.rg(b) {
                    out.push((b, db));
                }
            }
            &Op::Modulate { r, gamma, beta } => {
                let need = [self.rg(r), self.rg(gamma), self.rg(beta)];
                let (dr, dg, db) = ops::affine_modulate_backward(self.value(r), self.value(gamma), upstream, need)?;
                push_some(&mut out, r, dr);
                push_some(&mut out, gamma, dg);
                push_some(&mut out, beta, db);
            }
            &Op::Mse { pred, target } => {
                let d = ops::mse_loss_backward(self.value(pred), self.value(target), upstream.item())?;
                if self.rg(target) {
                    out.push((target, d.map(|v| -v)));
                }
                if self.rg(pred) {
                    out.push((pred, d));
                }
            }
            &Op::Sum(input) => {
                out.push((input, Tensor::full(self.value(input).shape(), upstream.item())));
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    out.push((a, upstream.zip_map(self.value(b), |g, y| g * y)?));
                }
                if self.rg(b) {
                    out.push((b, upstream.zip_map(self.value(a), |g, x| g * x)?));
                }
            }
            &Op::AddScalar(input) => out.push((input, upstream.clone())),
            &Op::SliceCols { input, start } => {
                let dx = ops::slice_cols_backward(self.value(input).shape(), start, upstream)?;
                out.push((input, dx));
            }
        }
        Ok(out.into_iter().filter(|(v, _)| self.rg(*v)).collect())
    }
}

fn push_some<T>(out: &mut Vec<(Var, Tensor<T>)>, var: Var, g: Option<Tensor<T>>) {
    if let Some(g) = g {
        out.push((var, g));
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(existing) => {
            *existing = existing.zip_map(&g, |a, b| a + b)?;
        }
        None => *slot = Some(g),
    }
    Ok(())
}
