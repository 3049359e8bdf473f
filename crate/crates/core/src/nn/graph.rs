//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! topological order, so the backward sweep is a single reverse scan.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::ops;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    Sigmoid(Var),
    Silu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    MulChannel { x: Var, gate: Var },
    AddChannel { x: Var, bias: Var },
    Concat(Var, Var),
    AvgPool2(Var),
    Upsample2(Var),
    Reshape(Var),
    PowerNormalize { x: Var, active: usize },
    WeightedSse { pred: Var, target: Tensor<T>, weights: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let out = ops::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
        );
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Conv2d { x, w, b }, ng)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let out = ops::linear_forward(self.value(x), self.value(w), b.map(|b| self.value(b)));
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(ops::sigmoid);
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * ops::sigmoid(v));
        let ng = self.ng(x);
        self.push(out, Op::Silu(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    /// `x[b, c, ..] * gate[b, c]`.
    pub fn mul_channel(&mut self, x: Var, gate: Var) -> Var {
        let out = ops::mul_channel(self.value(x), self.value(gate));
        let ng = self.ng(x) || self.ng(gate);
        self.push(out, Op::MulChannel { x, gate }, ng)
    }

    /// `x[b, c, ..] + bias[b, c]`.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Var {
        let out = ops::add_channel(self.value(x), self.value(bias));
        let ng = self.ng(x) || self.ng(bias);
        self.push(out, Op::AddChannel { x, bias }, ng)
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let out = ops::concat_channels(self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Concat(a, b), ng)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let out = ops::avg_pool2(self.value(x));
        let ng = self.ng(x);
        self.push(out, Op::AvgPool2(x), ng)
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let out = ops::upsample2(self.value(x));
        let ng = self.ng(x);
        self.push(out, Op::Upsample2(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self
            .value(x)
            .clone()
            .reshape(shape)
            .expect("reshape preserves element count");
        let ng = self.ng(x);
        self.push(out, Op::Reshape(x), ng)
    }

    /// Interpret each row of `x` (`[B, 2K]`, interleaved re/im) as `K`
    /// complex symbols, zero every symbol at index `>= active`, and scale the
    /// active prefix to unit average power.
    pub fn power_normalize(&mut self, x: Var, active: usize) -> Var {
        let out = ops::power_normalize_forward(self.value(x), active);
        let ng = self.ng(x);
        self.push(out, Op::PowerNormalize { x, active }, ng)
    }

    /// `sum_b weights[b] * ||pred[b] - target[b]||^2`, a scalar node.
    pub fn weighted_sse(&mut self, pred: Var, target: Tensor<T>, weights: Vec<T>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "weighted_sse shape mismatch");
        assert_eq!(weights.len(), p.batch(), "one weight per batch item");
        let mut total = T::zero();
        for (b, &w) in weights.iter().enumerate() {
            let s: T = p
                .item(b)
                .iter()
                .zip(target.item(b))
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum();
            total += w * s;
        }
        let ng = self.ng(pred);
        self.push(
            Tensor::scalar(total),
            Op::WeightedSse {
                pred,
                target,
                weights,
            },
            ng,
        )
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagate from a scalar node.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.backward_op(i, &op, &g);
            self.grads[i] = Some(g);
        }
    }

    fn backward_op(&mut self, i: usize, op: &Op<T>, g: &Tensor<T>) {
        match *op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b } => {
                let (dx, dw, db) = ops::conv2d_backward(
                    self.value(x),
                    self.value(w),
                    g,
                    self.ng(x),
                );
                if let Some(dx) = dx {
                    self.accumulate(x, dx);
                }
                self.accumulate(w, dw);
                if let Some(b) = b {
                    self.accumulate(b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) =
                    ops::linear_backward(self.value(x), self.value(w), g, self.ng(x));
                if let Some(dx) = dx {
                    self.accumulate(x, dx);
                }
                self.accumulate(w, dw);
                if let Some(b) = b {
                    self.accumulate(b, db);
                }
            }
            Op::Relu(x) => {
                let dx = self
                    .value(x)
                    .zip_map(g, |v, gv| if v > T::zero() { gv } else { T::zero() });
                self.accumulate(x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = self.nodes[i]
                    .value
                    .zip_map(g, |s, gv| gv * s * (T::one() - s));
                self.accumulate(x, dx);
            }
            Op::Silu(x) => {
                let dx = self.value(x).zip_map(g, |v, gv| {
                    let s = ops::sigmoid(v);
                    gv * s * (T::one() + v * (T::one() - s))
                });
                self.accumulate(x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.map(|v| -v));
            }
            Op::Scale(x, s) => {
                self.accumulate(x, g.map(|v| v * s));
            }
            Op::MulChannel { x, gate } => {
                let (dx, dgate) = ops::mul_channel_backward(self.value(x), self.value(gate), g);
                self.accumulate(x, dx);
                self.accumulate(gate, dgate);
            }
            Op::AddChannel { x, bias } => {
                let dbias = ops::channel_sums(g, self.value(bias).shape());
                self.accumulate(x, g.clone());
                self.accumulate(bias, dbias);
            }
            Op::Concat(a, b) => {
                let ca = self.value(a).shape()[1];
                let (da, db) = ops::split_channels(g, ca);
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::AvgPool2(x) => {
                let dx = ops::avg_pool2_backward(g, self.value(x).shape());
                self.accumulate(x, dx);
            }
            Op::Upsample2(x) => {
                let dx = ops::upsample2_backward(g, self.value(x).shape());
                self.accumulate(x, dx);
            }
            Op::Reshape(x) => {
                let shape = self.value(x).shape().to_vec();
                let dx = g.clone().reshape(&shape).expect("same element count");
                self.accumulate(x, dx);
            }
            Op::PowerNormalize { x, active } => {
                let dx = ops::power_normalize_backward(self.value(x), active, g);
                self.accumulate(x, dx);
            }
            Op::WeightedSse {
                pred,
                ref target,
                ref weights,
            } => {
                let p = self.value(pred);
                let n = p.per_item();
                let scale = g.data()[0];
                let mut dp = Tensor::zeros(p.shape());
                for (b, &w) in weights.iter().enumerate() {
                    let two_w = T::lit(2.0) * w * scale;
                    let dst = &mut dp.data_mut()[b * n..(b + 1) * n];
                    for ((d, &x), &y) in dst.iter_mut().zip(p.item(b)).zip(target.item(b)) {
                        *d = two_w * (x - y);
                    }
                }
                self.accumulate(pred, dp);
            }
        }
    }
}
