//! Minimal neural-network toolkit: autodiff graph, parameter storage, layers
//! and the optimizer used by both training stages.

pub mod gradcheck;
mod graph;
pub mod ops;
pub mod optim;

pub use graph::{Graph, Var};

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamSet`].
pub type ParamId = usize;

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Register every tensor as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.values.iter().map(|t| g.leaf(t.clone())).collect()
    }

    /// Register every tensor as a constant of `g` (inference, frozen nets).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.values.iter().map(|t| g.constant(t.clone())).collect()
    }

    /// Gradients of the leaves returned by [`bind`](Self::bind); parameters
    /// that did not influence the loss get zeros.
    pub fn grads(&self, g: &Graph<T>, vars: &[Var]) -> Vec<Tensor<T>> {
        self.values
            .iter()
            .zip(vars)
            .map(|(t, &v)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }
}

fn init_uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = T::one() / T::lit(fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, bound, rng)
}

/// Stride-1, same-padded 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel.0 * kernel.1;
        let w = params.add(
            format!("{name}.weight"),
            init_uniform(&[out_ch, in_ch, kernel.0, kernel.1], fan_in, rng),
        );
        let b = params.add(format!("{name}.bias"), init_uniform(&[out_ch], fan_in, rng));
        Self {
            w,
            b,
            in_ch,
            out_ch,
            kernel,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        g.conv2d(x, p[self.w], Some(p[self.b]))
    }
}

/// Fully connected layer on `[B, in]` rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w = params.add(
            format!("{name}.weight"),
            init_uniform(&[out_dim, in_dim], in_dim, rng),
        );
        let b = params.add(format!("{name}.bias"), init_uniform(&[out_dim], in_dim, rng));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        g.linear(x, p[self.w], Some(p[self.b]))
    }
}

/// Fixed affine map `y = (x - center) * scale` fitted on training data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Standardizer {
    pub center: f64,
    pub scale: f64,
}

impl Default for Standardizer {
    fn default() -> Self {
        Self {
            center: 0.0,
            scale: 1.0,
        }
    }
}

impl Standardizer {
    /// Mean and inverse standard deviation over every entry of `x`.
    pub fn fit<T: Scalar>(x: &Tensor<T>) -> Self {
        let n = x.len().max(1) as f64;
        let mean = x.data().iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let var = x.data().iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
        let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        Self { center: mean, scale }
    }

    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        let (c, s) = (T::lit(self.center), T::lit(self.scale));
        x.map(|v| (v - c) * s)
    }

    pub fn invert<T: Scalar>(&self, y: &Tensor<T>) -> Tensor<T> {
        let (c, s) = (T::lit(self.center), T::lit(1.0 / self.scale));
        y.map(|v| v * s + c)
    }

    pub fn apply_graph<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let shift = g.constant(Tensor::full(g.value(x).shape(), T::lit(-self.center)));
        let h = g.add(x, shift);
        g.scale(h, T::lit(self.scale))
    }

    pub fn invert_graph<T: Scalar>(&self, g: &mut Graph<T>, y: Var) -> Var {
        let h = g.scale(y, T::lit(1.0 / self.scale));
        let shift = g.constant(Tensor::full(g.value(h).shape(), T::lit(self.center)));
        g.add(h, shift)
    }
}
