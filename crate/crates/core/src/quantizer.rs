//! Fixed-bit latent representation: mu-law companding followed by a
//! mid-rise uniform scalar quantizer, applied to real and imaginary parts
//! independently.

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    /// Quantizer in the training loop with a straight-through gradient.
    Ste,
    /// Quantize a model trained without quantization.
    PostHoc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantSettings {
    pub enabled: bool,
    pub mu: f64,
    pub bits: u32,
    pub mode: QuantMode,
    /// EMA decay of the tracked input scale.
    pub scale_decay: f64,
}

impl Default for QuantSettings {
    fn default() -> Self {
        Self {
            enabled: false,
            mu: 50.0,
            bits: 4,
            mode: QuantMode::Ste,
            scale_decay: 0.99,
        }
    }
}

/// Parameters of one quantizer instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantConfig {
    pub mu: f64,
    pub bits: u32,
    /// Pre-companding scale: components are divided by this and clipped to
    /// `[-1, 1]`.
    pub s_max: f64,
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) {
            return Err(Error::InvalidArgument("mu must be > 0".into()));
        }
        if !(1..=24).contains(&self.bits) {
            return Err(Error::InvalidArgument("bits must be in 1..=24".into()));
        }
        if !(self.s_max > 0.0 && self.s_max.is_finite()) {
            return Err(Error::InvalidArgument("s_max must be positive".into()));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        2.0 / (1u64 << self.bits) as f64
    }
}

fn check_unit<T: Scalar>(x: T, what: &str) -> Result<()> {
    if x.abs() > T::one() || x.is_nan() {
        return Err(Error::OutOfRange(format!("{what} input {x} outside [-1, 1]")));
    }
    Ok(())
}

/// `sign(x) * ln(1 + mu|x|) / ln(1 + mu)`.
pub fn compand<T: Scalar>(x: T, mu: T) -> Result<T> {
    check_unit(x, "compand")?;
    Ok(x.signum() * (T::one() + mu * x.abs()).ln() / (T::one() + mu).ln())
}

/// `sign(y) * ((1 + mu)^|y| - 1) / mu`, the inverse of [`compand`].
pub fn expand<T: Scalar>(y: T, mu: T) -> Result<T> {
    check_unit(y, "expand")?;
    Ok(y.signum() * ((T::one() + mu).powf(y.abs()) - T::one()) / mu)
}

/// Mid-rise quantizer with `2^bits` levels on `[-1, 1]`; returns the code
/// and its reconstruction level.
pub fn quantize_uniform<T: Scalar>(y: T, bits: u32) -> Result<(u32, T)> {
    check_unit(y, "quantizer")?;
    let levels = 1u64 << bits;
    let delta = 2.0 / levels as f64;
    let raw = ((y.as_f64() + 1.0) / delta).floor();
    let code = raw.clamp(0.0, (levels - 1) as f64) as u32;
    Ok((code, dequantize(code, bits)))
}

pub fn dequantize<T: Scalar>(code: u32, bits: u32) -> T {
    let delta = 2.0 / (1u64 << bits) as f64;
    T::lit(-1.0 + (code as f64 + 0.5) * delta)
}

fn quantize_component<T: Scalar>(v: T, cfg: &QuantConfig) -> (T, bool) {
    let x = v.as_f64() / cfg.s_max;
    let clipped = x.abs() > 1.0;
    let x = x.clamp(-1.0, 1.0);
    let y = compand(x, cfg.mu).expect("clipped to unit range");
    let (_, yq) = quantize_uniform(y, cfg.bits).expect("companded range");
    let xq = expand(yq, cfg.mu).expect("level inside unit range");
    (T::lit(xq * cfg.s_max), clipped)
}

/// Quantize-dequantize every real and imaginary component. Returns the
/// reconstruction and the number of clipped components.
pub fn quantize_latent<T: Scalar>(s: &[Complex<T>], cfg: &QuantConfig) -> (Vec<Complex<T>>, usize) {
    let mut clips = 0;
    let out = s
        .iter()
        .map(|z| {
            let (re, c1) = quantize_component(z.re, cfg);
            let (im, c2) = quantize_component(z.im, cfg);
            clips += c1 as usize + c2 as usize;
            Complex::new(re, im)
        })
        .collect();
    (out, clips)
}

/// Batch form on interleaved `[B, 2K]` latents, first `active` complex
/// entries per row. Returns `(q(s) - s, clip_count)`: adding the first item to
/// `s` as a constant gives the straight-through estimator.
pub fn quantization_offset<T: Scalar>(
    latents: &Tensor<T>,
    active: usize,
    cfg: &QuantConfig,
) -> (Tensor<T>, usize) {
    let mut out = Tensor::zeros(latents.shape());
    let mut clips = 0;
    for b in 0..latents.batch() {
        let row = latents.item(b);
        let dst = out.item_mut(b);
        for i in 0..2 * active {
            let (q, c) = quantize_component(row[i], cfg);
            clips += c as usize;
            dst[i] = q - row[i];
        }
    }
    (out, clips)
}

/// Exponential moving average of the per-batch max `|component|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleTracker {
    pub decay: f64,
    pub value: Option<f64>,
}

impl ScaleTracker {
    pub fn new(decay: f64) -> Self {
        Self { decay, value: None }
    }

    pub fn observe<T: Scalar>(&mut self, latents: &Tensor<T>, active: usize) -> f64 {
        let mut m = 0.0f64;
        for b in 0..latents.batch() {
            for &v in &latents.item(b)[..2 * active] {
                m = m.max(v.as_f64().abs());
            }
        }
        let next = match self.value {
            None => m,
            Some(prev) => self.decay * prev + (1.0 - self.decay) * m,
        };
        self.value = Some(next);
        next
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compand_examples() {
        assert_eq!(compand(0.0, 50.0).unwrap(), 0.0);
        assert!((compand(1.0f64, 50.0).unwrap() - 1.0).abs() < 1e-15);
        let want = 6f64.ln() / 51f64.ln();
        assert!((compand(0.1, 50.0).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.45569).abs() < 1e-4);
        assert!(matches!(compand(1.5, 50.0), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn expand_examples() {
        for x in [-1.0f64, -0.5, 0.0, 0.3, 1.0] {
            let y = compand(x, 50.0).unwrap();
            assert!((expand(y, 50.0).unwrap() - x).abs() < 1e-9);
        }
        assert!((expand(1.0f64, 50.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((expand(0.45569f64, 50.0).unwrap() - 0.1).abs() < 1e-4);
        assert!(expand(-1.01, 50.0).is_err());
    }

    #[test]
    fn uniform_quantizer_examples() {
        let mut levels: Vec<f64> = [-1.0, -0.7, -0.1, 0.0, 0.2, 0.9, 1.0]
            .iter()
            .map(|&y| quantize_uniform(y, 1).unwrap().1)
            .collect();
        levels.dedup();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        assert_eq!(levels, vec![-0.5, 0.5]);
        assert_eq!(quantize_uniform(1.0, 4).unwrap(), (15, 0.9375));
        assert_eq!(quantize_uniform(-1.0, 4).unwrap(), (0, -0.9375));
        assert!(quantize_uniform(1.2, 4).is_err());
    }

    #[test]
    fn zero_latent_lands_on_first_positive_level() {
        let cfg = QuantConfig {
            mu: 50.0,
            bits: 4,
            s_max: 2.0,
        };
        let (q, clips) = quantize_latent(&[Complex::new(0.0f64, 0.0)], &cfg);
        assert_eq!(clips, 0);
        let bound = expand(cfg.step() / 2.0, 50.0).unwrap() * cfg.s_max;
        assert!(q[0].re.abs() <= bound + 1e-15 && q[0].im.abs() <= bound + 1e-15);
    }

    #[test]
    fn outliers_are_clipped_and_counted() {
        let cfg = QuantConfig {
            mu: 50.0,
            bits: 4,
            s_max: 1.0,
        };
        let (q, clips) = quantize_latent(&[Complex::new(3.0f64, -0.2)], &cfg);
        assert_eq!(clips, 1);
        assert!(q[0].re <= 1.0);
    }

    #[test]
    fn offset_is_zero_beyond_active_prefix() {
        let t = Tensor::from_vec(&[1, 6], vec![0.3f64, -0.2, 0.9, 0.1, 5.0, 5.0]).unwrap();
        let cfg = QuantConfig {
            mu: 50.0,
            bits: 3,
            s_max: 1.0,
        };
        let (off, clips) = quantization_offset(&t, 2, &cfg);
        assert_eq!(clips, 0);
        assert_eq!(&off.data()[4..], &[0.0, 0.0]);
        assert!(off.data()[..4].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn scale_tracker_ema() {
        let mut tr = ScaleTracker::new(0.5);
        let a = Tensor::from_vec(&[1, 2], vec![2.0f64, -4.0]).unwrap();
        assert_eq!(tr.observe(&a, 1), 4.0);
        let b = Tensor::from_vec(&[1, 2], vec![1.0f64, 0.0]).unwrap();
        assert_eq!(tr.observe(&b, 1), 2.5);
    }
}
