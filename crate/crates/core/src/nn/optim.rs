use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::ParamSet;

/// Adam hyper-parameters plus the cosine-annealed learning-rate range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    pub iterations: usize,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr_max: 3e-4,
            lr_min: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            iterations: 100_000,
            batch_size: 100,
        }
    }
}

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at `total`.
pub fn cosine_lr(lr_max: f64, lr_min: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr_max;
    }
    let frac = (step.min(total - 1)) as f64 / (total - 1) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Adam state for one [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: OptimizerConfig,
    pub step: usize,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: OptimizerConfig, params: &ParamSet<T>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(
            self.config.lr_max,
            self.config.lr_min,
            self.step,
            self.config.iterations,
        )
    }

    /// Clip, then apply one update. Returns the pre-clip gradient norm.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &mut [Tensor<T>]) -> f64 {
        let norm = grads
            .iter()
            .map(|g| g.sq_norm().as_f64())
            .sum::<f64>()
            .sqrt();
        if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            let s = T::lit(self.config.clip_norm / norm);
            for g in grads.iter_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        let step_size = T::lit(lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let eps = T::lit(self.config.eps);
        let (tb1, tb2) = (T::lit(b1), T::lit(b2));
        let (ob1, ob2) = (T::one() - tb1, T::one() - tb2);
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = tb1 * m[j] + ob1 * g[j];
                v[j] = tb2 * v[j] + ob2 * g[j] * g[j];
                *w -= step_size * m[j] / (v[j].sqrt() / bc2_sqrt + eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert!((cosine_lr(3e-4, 1e-5, 0, 100) - 3e-4).abs() < 1e-15);
        assert!((cosine_lr(3e-4, 1e-5, 99, 100) - 1e-5).abs() < 1e-15);
        let mid = cosine_lr(3e-4, 1e-5, 50, 101);
        assert!((mid - 0.5 * (3e-4 + 1e-5)).abs() < 1e-12);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut params = ParamSet::<f64>::new();
        params.add("x", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap());
        let cfg = OptimizerConfig {
            lr_max: 0.1,
            lr_min: 0.001,
            iterations: 500,
            clip_norm: 0.0,
            ..Default::default()
        };
        let mut opt = Adam::new(cfg, &params);
        for _ in 0..500 {
            let mut g = vec![params.get(0).map(|v| 2.0 * v)];
            opt.update(&mut params, &mut g);
        }
        assert!(params.get(0).sq_norm() < 1e-4);
    }
}
