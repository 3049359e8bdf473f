//! Stage 2: residual diffusion refinement of the stage-1 estimate.
//!
//! The forward process interpolates from the clean channel `z0` toward the
//! coarse estimate `h_hat`:
//! `z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) (lambda r + eps)` with
//! `r = h_hat - z0`. The denoiser predicts `z0` directly and sampling uses the
//! deterministic (noise-free) DDIM update.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{iteration_rng, Autoencoder, CheSetup, LinkOptions};
use crate::channel::{self, ChannelConfig};
use crate::csi_data::CsiDataset;
use crate::error::{Error, Result};
use crate::nn::optim::{Adam, OptimizerConfig};
use crate::nn::{Conv2d, Graph, Linear, ParamSet, Standardizer, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    /// Linear betas on the usual `[1e-4, 0.02]` range rescaled to `N` steps.
    Linear,
}

/// Noise schedule; every array is indexed by `t = 0..=n` with the
/// conventions `alpha_bar[0] = 1`, `beta[0] = 0`, `eta[0] = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub n: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub eta: Vec<f64>,
    pub lambda: f64,
}

pub fn make_schedule(n: usize, kind: ScheduleKind) -> Result<DiffusionSchedule> {
    if n < 1 {
        return Err(Error::InvalidArgument("diffusion chain length must be >= 1".into()));
    }
    let mut beta = vec![0.0; n + 1];
    match kind {
        ScheduleKind::Cosine => {
            let f = |t: usize| {
                let x = (t as f64 / n as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
            };
            let f0 = f(0);
            for t in 1..=n {
                let ab = f(t) / f0;
                let ab_prev = f(t - 1) / f0;
                beta[t] = (1.0 - ab / ab_prev).clamp(f64::MIN_POSITIVE, MAX_BETA);
            }
        }
        ScheduleKind::Linear => {
            let scale = 1000.0 / n as f64;
            let (lo, hi) = (1e-4 * scale, 0.02 * scale);
            for t in 1..=n {
                let frac = if n == 1 { 1.0 } else { (t - 1) as f64 / (n - 1) as f64 };
                beta[t] = (lo + frac * (hi - lo)).min(MAX_BETA);
            }
        }
    }
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = vec![1.0; n + 1];
    for t in 1..=n {
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
    }
    let ab_n = alpha_bar[n];
    let lambda = ab_n.sqrt() / (1.0 - ab_n).sqrt();
    let eta = alpha_bar
        .iter()
        .map(|&ab| lambda * (1.0 - ab).sqrt() / ab.sqrt())
        .collect();
    Ok(DiffusionSchedule {
        n,
        beta,
        alpha,
        alpha_bar,
        eta,
        lambda,
    })
}

impl DiffusionSchedule {
    /// Loss weight `min(ab_t / (1 - ab_t), w_max)`.
    pub fn loss_weight(&self, t: usize, w_max: f64) -> f64 {
        let ab = self.alpha_bar[t];
        (ab / (1.0 - ab)).min(w_max)
    }

    /// Descending timesteps `[n, ..., 0]` with `n_steps` uniform strides.
    pub fn strided_steps(&self, n_steps: usize) -> Result<Vec<usize>> {
        if n_steps < 1 || n_steps > self.n {
            return Err(Error::InvalidArgument(format!(
                "n_steps must be in 1..={}, got {n_steps}",
                self.n
            )));
        }
        Ok((0..=n_steps)
            .map(|i| ((self.n * (n_steps - i)) as f64 / n_steps as f64).round() as usize)
            .collect())
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.n {
            return Err(Error::OutOfRange(format!("timestep {t} outside 0..={}", self.n)));
        }
        Ok(())
    }
}

/// `sqrt(ab_t) z0 + sqrt(1 - ab_t) (lambda r + eps)`.
pub fn forward_diffuse<T: Scalar>(
    z0: &Tensor<T>,
    r: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    sched: &DiffusionSchedule,
) -> Result<Tensor<T>> {
    forward_diffuse_with(z0, r, t, eps, sched, sched.lambda)
}

/// [`forward_diffuse`] with an explicit residual scale (0 gives the
/// standard process).
pub fn forward_diffuse_with<T: Scalar>(
    z0: &Tensor<T>,
    r: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    sched: &DiffusionSchedule,
    lambda: f64,
) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    if z0.shape() != r.shape() || z0.shape() != eps.shape() {
        return Err(Error::Shape("forward_diffuse operands differ in shape".into()));
    }
    let a = T::lit(sched.alpha_bar[t].sqrt());
    let b = T::lit((1.0 - sched.alpha_bar[t]).sqrt());
    let l = T::lit(lambda);
    let data = z0
        .data()
        .iter()
        .zip(r.data())
        .zip(eps.data())
        .map(|((&z, &r), &e)| a * z + b * (l * r + e))
        .collect();
    Tensor::from_vec(z0.shape(), data)
}

/// Deterministic update from `t` to `t_prev < t`.
pub fn denoise_step<T: Scalar>(
    z_t: &Tensor<T>,
    z0_hat: &Tensor<T>,
    t: usize,
    t_prev: usize,
    sched: &DiffusionSchedule,
) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    if t_prev >= t {
        return Err(Error::InvalidArgument(format!(
            "denoise_step needs t_prev < t, got {t_prev} >= {t}"
        )));
    }
    if z_t.shape() != z0_hat.shape() {
        return Err(Error::Shape("denoise_step operands differ in shape".into()));
    }
    let (ab, ab_prev) = (sched.alpha_bar[t], sched.alpha_bar[t_prev]);
    let m = T::lit((1.0 - ab_prev).sqrt() / (1.0 - ab).sqrt());
    let sa = T::lit(ab.sqrt());
    let sa_prev = T::lit(ab_prev.sqrt());
    Ok(z_t.zip_map(z0_hat, |z, x| sa_prev * x + m * (z - sa * x)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionMode {
    ResidualDiffusion,
    GenerativeDiffusion,
    SupervisedUnet,
}

impl DiffusionMode {
    pub fn tag(self) -> &'static str {
        match self {
            DiffusionMode::ResidualDiffusion => "rd",
            DiffusionMode::GenerativeDiffusion => "gd",
            DiffusionMode::SupervisedUnet => "unet",
        }
    }

    /// Residual scale used by the forward process in this mode.
    pub fn lambda(self, sched: &DiffusionSchedule) -> f64 {
        match self {
            DiffusionMode::ResidualDiffusion => sched.lambda,
            _ => 0.0,
        }
    }
}

/// Noise used for `z_N` at sampling time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerInit {
    Stochastic,
    /// `eps = 0`, reproducible evaluation.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub mults: Vec<usize>,
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            mults: vec![1, 2, 3, 4],
            time_dim: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct UResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    temb: Linear,
    skip: Option<Conv2d>,
}

impl UResBlock {
    fn new<T: Scalar, R: Rng + ?Sized>(
        p: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        tdim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv1: Conv2d::new(p, &format!("{name}.conv1"), cin, cout, (3, 3), rng),
            conv2: Conv2d::new(p, &format!("{name}.conv2"), cout, cout, (3, 3), rng),
            temb: Linear::new(p, &format!("{name}.temb"), tdim, cout, rng),
            skip: (cin != cout).then(|| Conv2d::new(p, &format!("{name}.skip"), cin, cout, (1, 1), rng)),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var, temb: Var) -> Var {
        let h = self.conv1.forward(g, p, x);
        let bias = self.temb.forward(g, p, temb);
        let h = g.add_channel(h, bias);
        let h = g.silu(h);
        let h = self.conv2.forward(g, p, h);
        let s = match &self.skip {
            Some(c) => c.forward(g, p, x),
            None => x,
        };
        g.add(s, h)
    }
}

/// Small U-Net predicting `z0` from `concat(z_t, h_hat)` and `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser<T> {
    pub config: DenoiserConfig,
    pub rows: usize,
    pub cols: usize,
    /// Chain length; timesteps are embedded as `t * 1000 / n`.
    pub n: usize,
    pub params: ParamSet<T>,
    /// Map from normalized CSI to the diffusion state space.
    pub data_std: Standardizer,
    t_fc1: Linear,
    t_fc2: Linear,
    conv_in: Conv2d,
    down: Vec<UResBlock>,
    mid: UResBlock,
    up: Vec<UResBlock>,
    conv_out: Conv2d,
}

/// Sinusoidal embedding `[sin(t w_i), cos(t w_i)]`, `w_i = 10000^(-i/half)`.
pub fn timestep_embedding<T: Scalar>(t: &[f64], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &tv in t {
        for i in 0..half {
            let w = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
            data.push(T::lit((tv * w).sin()));
        }
        for i in 0..half {
            let w = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
            data.push(T::lit((tv * w).cos()));
        }
        if dim % 2 == 1 {
            data.push(T::zero());
        }
    }
    Tensor::from_vec(&[t.len(), dim], data).expect("embedding size")
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(config: DenoiserConfig, rows: usize, cols: usize, n: usize, seed: u64) -> Result<Self> {
        let levels = config.mults.len();
        if config.base_channels == 0 || levels == 0 || config.mults.contains(&0) {
            return Err(Error::InvalidArgument(
                "denoiser needs base_channels >= 1 and non-zero multipliers".into(),
            ));
        }
        if config.time_dim < 2 {
            return Err(Error::InvalidArgument("time_dim must be >= 2".into()));
        }
        let div = 1usize << (levels - 1);
        if !rows.is_multiple_of(div) || !cols.is_multiple_of(div) || rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "CSI shape {rows}x{cols} must be divisible by {div} for {levels} U-Net levels"
            )));
        }
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let rng = &mut rng;
        let mut p = ParamSet::new();
        let td = config.time_dim;
        let t_fc1 = Linear::new(&mut p, "time.fc1", td, td, rng);
        let t_fc2 = Linear::new(&mut p, "time.fc2", td, td, rng);
        let base = config.base_channels;
        let conv_in = Conv2d::new(&mut p, "conv_in", 4, base, (3, 3), rng);
        let mut down = Vec::new();
        let mut ch = base;
        let mut skips = Vec::new();
        for (i, &m) in config.mults.iter().enumerate() {
            let out = base * m;
            down.push(UResBlock::new(&mut p, &format!("down{i}"), ch, out, td, rng));
            ch = out;
            skips.push(ch);
        }
        let mid = UResBlock::new(&mut p, "mid", ch, ch, td, rng);
        let mut up = Vec::new();
        for (i, &m) in config.mults.iter().enumerate().rev() {
            let out = base * m;
            let skip = skips[i];
            up.push(UResBlock::new(&mut p, &format!("up{i}"), ch + skip, out, td, rng));
            ch = out;
        }
        // Zero head: an untrained denoiser returns the stage-1 estimate.
        let conv_out = Conv2d::new(&mut p, "conv_out", ch, 2, (3, 3), rng);
        p.get_mut(conv_out.w).data_mut().fill(T::zero());
        p.get_mut(conv_out.b).data_mut().fill(T::zero());
        Ok(Self {
            config,
            rows,
            cols,
            n,
            params: p,
            data_std: Standardizer::default(),
            t_fc1,
            t_fc2,
            conv_in,
            down,
            mid,
            up,
            conv_out,
        })
    }

    /// New denoiser sized for `data`, with the state standardization fitted
    /// on it.
    pub fn for_data(config: DenoiserConfig, data: &CsiDataset<T>, n: usize, seed: u64) -> Result<Self> {
        let mut d = Self::new(config, data.rows(), data.cols(), n, seed)?;
        d.data_std = Standardizer::fit(data.tensor());
        Ok(d)
    }

    /// Output `h_hat + f(z_t, h_hat, t)`.
    pub fn graph(&self, g: &mut Graph<T>, p: &[Var], z_t: Var, h_hat: Var, t: &[usize]) -> Var {
        let scale = 1000.0 / self.n.max(1) as f64;
        let tv: Vec<f64> = t.iter().map(|&t| t as f64 * scale).collect();
        let emb = g.constant(timestep_embedding(&tv, self.config.time_dim));
        let e = self.t_fc1.forward(g, p, emb);
        let e = g.silu(e);
        let temb = self.t_fc2.forward(g, p, e);
        let temb = g.silu(temb);

        let x = g.concat(z_t, h_hat);
        let mut h = self.conv_in.forward(g, p, x);
        let mut skips = Vec::new();
        let last = self.down.len() - 1;
        for (i, blk) in self.down.iter().enumerate() {
            h = blk.forward(g, p, h, temb);
            skips.push(h);
            if i < last {
                h = g.avg_pool2(h);
            }
        }
        h = self.mid.forward(g, p, h, temb);
        for (j, blk) in self.up.iter().enumerate() {
            let level = last - j;
            if level < last {
                h = g.upsample2(h);
            }
            h = g.concat(h, skips[level]);
            h = blk.forward(g, p, h, temb);
        }
        let h = g.silu(h);
        let out = self.conv_out.forward(g, p, h);
        g.add(h_hat, out)
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 2 || s[2] != self.rows || s[3] != self.cols {
            return Err(Error::Shape(format!(
                "denoiser expects [B, 2, {}, {}], got {s:?}",
                self.rows, self.cols
            )));
        }
        Ok(())
    }

    /// Inference forward pass.
    pub fn predict(&self, z_t: &Tensor<T>, h_hat: &Tensor<T>, t: &[usize]) -> Result<Tensor<T>> {
        self.check(z_t)?;
        if z_t.shape() != h_hat.shape() || t.len() != z_t.batch() {
            return Err(Error::Shape("denoiser inputs disagree in batch or shape".into()));
        }
        let n = z_t.batch();
        let mut parts = Vec::new();
        let mut lo = 0;
        while lo < n {
            let hi = (lo + CHUNK).min(n);
            let mut g = Graph::new();
            let p = self.params.bind_frozen(&mut g);
            let zv = g.constant(z_t.slice_batch(lo, hi));
            let hv = g.constant(h_hat.slice_batch(lo, hi));
            let out = self.graph(&mut g, &p, zv, hv, &t[lo..hi]);
            parts.push(g.take_value(out));
            lo = hi;
        }
        Tensor::concat(&parts)
    }
}

impl<T: Scalar> Denoiser<T> {
    /// Refine a normalized stage-1 estimate; sampling runs in the
    /// standardized space and the result is mapped back.
    pub fn refine<R: Rng + ?Sized>(
        &self,
        h_hat: &Tensor<T>,
        sched: &DiffusionSchedule,
        n_steps: usize,
        mode: DiffusionMode,
        init: SamplerInit,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        let h = self.data_std.apply(h_hat);
        let z = sample(&h, self, sched, n_steps, mode, init, rng)?;
        Ok(self.data_std.invert(&z))
    }
}

/// Anything that maps `(z_t, h_hat, t)` to a clean-signal estimate.
pub trait X0Predictor<T> {
    fn predict_x0(&self, z_t: &Tensor<T>, h_hat: &Tensor<T>, t: usize) -> Result<Tensor<T>>;
}

impl<T: Scalar> X0Predictor<T> for Denoiser<T> {
    fn predict_x0(&self, z_t: &Tensor<T>, h_hat: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        self.predict(z_t, h_hat, &vec![t; z_t.batch()])
    }
}

/// Reverse process starting from the stage-1 estimate `h_hat`.
pub fn sample<T: Scalar, P: X0Predictor<T> + ?Sized, R: Rng + ?Sized>(
    h_hat: &Tensor<T>,
    model: &P,
    sched: &DiffusionSchedule,
    n_steps: usize,
    mode: DiffusionMode,
    init: SamplerInit,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if mode == DiffusionMode::SupervisedUnet {
        return model.predict_x0(h_hat, h_hat, 0);
    }
    let steps = sched.strided_steps(n_steps)?;
    let n = sched.n;
    let mut z = match (mode, init) {
        (DiffusionMode::GenerativeDiffusion, _) => Tensor::randn(h_hat.shape(), T::one(), rng),
        (_, SamplerInit::Zero) => h_hat.map(|v| v * T::lit(sched.alpha_bar[n].sqrt())),
        (_, SamplerInit::Stochastic) => {
            let eps = Tensor::randn(h_hat.shape(), T::one(), rng);
            let a = T::lit(sched.alpha_bar[n].sqrt());
            let b = T::lit((1.0 - sched.alpha_bar[n]).sqrt());
            h_hat.zip_map(&eps, |h, e| a * h + b * e)
        }
    };
    for w in steps.windows(2) {
        let x0 = model.predict_x0(&z, h_hat, w[0])?;
        z = denoise_step(&z, &x0, w[0], w[1], sched)?;
    }
    Ok(z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    /// Residual chain length `N`.
    #[serde(rename = "N")]
    pub n: usize,
    pub schedule: ScheduleKind,
    pub mode: DiffusionMode,
    pub n_steps_infer: usize,
    pub init: SamplerInit,
    pub base_channels: usize,
    pub mults: Vec<usize>,
    pub time_dim: usize,
    /// Clamp of the loss weight `ab / (1 - ab)`.
    pub weight_max: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        Self {
            n: 20,
            schedule: ScheduleKind::Cosine,
            mode: DiffusionMode::ResidualDiffusion,
            n_steps_infer: 2,
            init: SamplerInit::Zero,
            base_channels: d.base_channels,
            mults: d.mults,
            time_dim: d.time_dim,
            weight_max: 5.0,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl DiffusionConfig {
    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            base_channels: self.base_channels,
            mults: self.mults.clone(),
            time_dim: self.time_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::InvalidArgument("diff.N must be >= 1".into()));
        }
        if self.n_steps_infer < 1 || self.n_steps_infer > self.n {
            return Err(Error::InvalidArgument("diff.n_steps_infer must be in 1..=N".into()));
        }
        if !(self.weight_max > 0.0) {
            return Err(Error::InvalidArgument("diff.weight_max must be > 0".into()));
        }
        Ok(())
    }
}

/// Pieces of one training batch (in the standardized space), drawn before
/// the forward pass.
#[derive(Debug, Clone)]
pub struct DiffBatch<T> {
    pub z0: Tensor<T>,
    pub h_hat: Tensor<T>,
    pub t: Vec<usize>,
    pub eps: Tensor<T>,
}

/// `sum_b w_b ||z0_b - prediction_b||^2 / B` and parameter gradients.
pub fn diffusion_loss<T: Scalar>(
    den: &Denoiser<T>,
    batch: &DiffBatch<T>,
    sched: &DiffusionSchedule,
    mode: DiffusionMode,
    weight_max: f64,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let b = batch.z0.batch();
    let (z_t, weights, t) = if mode == DiffusionMode::SupervisedUnet {
        (batch.h_hat.clone(), vec![T::lit(1.0 / b as f64); b], vec![0; b])
    } else {
        let lambda = mode.lambda(sched);
        let mut parts = Vec::with_capacity(b);
        for i in 0..b {
            let z0 = batch.z0.slice_batch(i, i + 1);
            let r = batch.h_hat.slice_batch(i, i + 1).zip_map(&z0, |h, z| h - z);
            let eps = batch.eps.slice_batch(i, i + 1);
            parts.push(forward_diffuse_with(&z0, &r, batch.t[i], &eps, sched, lambda)?);
        }
        let w = batch
            .t
            .iter()
            .map(|&t| T::lit(sched.loss_weight(t, weight_max) / b as f64))
            .collect();
        (Tensor::concat(&parts)?, w, batch.t.clone())
    };
    let mut g = Graph::new();
    let p = den.params.bind(&mut g);
    let zv = g.constant(z_t);
    let hv = g.constant(batch.h_hat.clone());
    let out = den.graph(&mut g, &p, zv, hv, &t);
    let loss = g.weighted_sse(out, batch.z0.clone(), weights);
    let val = g.value(loss).data()[0].as_f64();
    g.backward(loss);
    Ok((val, den.params.grads(&g, &p)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffLogRow {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DiffLog {
    pub rows: Vec<DiffLogRow>,
}

impl DiffLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.write_to(std::fs::File::create(path)?, true)
    }

    /// Append rows to an existing log, or create it with a header.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let fresh = !path.exists();
        let f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        self.write_to(f, fresh)
    }

    fn write_to(&self, f: std::fs::File, header: bool) -> Result<()> {
        let mut f = std::io::BufWriter::new(f);
        if header {
            writeln!(f, "iteration,loss,lr,grad_norm")?;
        }
        for r in &self.rows {
            writeln!(f, "{},{:e},{:e},{:e}", r.iteration, r.loss, r.lr, r.grad_norm)?;
        }
        f.flush()?;
        Ok(())
    }

    /// Mean loss over the first / last `n` rows.
    pub fn head_tail_mean(&self, n: usize) -> (f64, f64) {
        let n = n.min(self.rows.len()).max(1);
        let mean = |r: &[DiffLogRow]| r.iter().map(|x| x.loss).sum::<f64>() / r.len() as f64;
        (mean(&self.rows[..n]), mean(&self.rows[self.rows.len() - n..]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffTrainOptions {
    pub diffusion: DiffusionConfig,
    pub channel: ChannelConfig,
    /// Rate at which the frozen autoencoder produces `h_hat`.
    pub k_active: usize,
    pub che: CheSetup,
    pub seed: u64,
}

/// Resumable stage-2 training state.
#[derive(Debug, Clone)]
pub struct DiffTrainer<T> {
    pub model: Denoiser<T>,
    pub adam: Adam<T>,
    pub schedule: DiffusionSchedule,
    pub iteration: usize,
    pub log: DiffLog,
}

impl<T: Scalar> DiffTrainer<T> {
    pub fn new(model: Denoiser<T>, opts: &DiffTrainOptions) -> Result<Self> {
        opts.diffusion.validate()?;
        let schedule = make_schedule(opts.diffusion.n, opts.diffusion.schedule)?;
        Ok(Self {
            adam: Adam::new(opts.diffusion.optimizer, &model.params),
            model,
            schedule,
            iteration: 0,
            log: DiffLog::default(),
        })
    }

    /// Sample a batch, run the frozen stage 1, draw `t` and noise.
    pub fn draw_batch<R: Rng + ?Sized>(
        &self,
        data: &CsiDataset<T>,
        ae: &Autoencoder<T>,
        opts: &DiffTrainOptions,
        rng: &mut R,
    ) -> Result<DiffBatch<T>> {
        let bs = opts.diffusion.optimizer.batch_size.min(data.len());
        let idx = sample_indices(rng, data.len(), bs).into_vec();
        let z0 = data.batch(&idx);
        let observed = opts.che.corrupt(&z0, rng);
        let snr: Vec<f64> = (0..bs)
            .map(|_| channel::sample_training_snr(opts.channel.train_snr_range_db, rng))
            .collect();
        let link = LinkOptions {
            k_active: opts.k_active,
            channel: opts.channel,
            quant: None,
        };
        let h_hat = ae.reconstruct_at(&observed, &snr, &link, rng)?;
        let t = (0..bs).map(|_| rng.gen_range(1..=self.schedule.n)).collect();
        let eps = Tensor::randn(z0.shape(), T::one(), rng);
        let std = &self.model.data_std;
        Ok(DiffBatch {
            z0: std.apply(&z0),
            h_hat: std.apply(&h_hat),
            t,
            eps,
        })
    }

    pub fn train(
        &mut self,
        data: &CsiDataset<T>,
        ae: &Autoencoder<T>,
        opts: &DiffTrainOptions,
        until: usize,
    ) -> Result<()> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        while self.iteration < until {
            let mut rng = iteration_rng(opts.seed, self.iteration);
            let batch = self.draw_batch(data, ae, opts, &mut rng)?;
            let (loss, mut grads) = diffusion_loss(
                &self.model,
                &batch,
                &self.schedule,
                opts.diffusion.mode,
                opts.diffusion.weight_max,
            )?;
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Diverged {
                    iteration: self.iteration,
                    detail: format!("diffusion loss {loss}, lr {:.3e}", self.adam.current_lr()),
                });
            }
            let lr = self.adam.current_lr();
            let grad_norm = self.adam.update(&mut self.model.params, &mut grads);
            self.log.rows.push(DiffLogRow {
                iteration: self.iteration,
                loss,
                lr,
                grad_norm,
            });
            self.iteration += 1;
        }
        Ok(())
    }
}

/// Train a fresh denoiser against a frozen autoencoder.
pub fn train_denoiser<T: Scalar>(
    data: &CsiDataset<T>,
    ae: &Autoencoder<T>,
    opts: &DiffTrainOptions,
) -> Result<(Denoiser<T>, DiffLog)> {
    let model = Denoiser::for_data(opts.diffusion.denoiser(), data, opts.diffusion.n, opts.seed)?;
    let mut trainer = DiffTrainer::new(model, opts)?;
    trainer.train(data, ae, opts, opts.diffusion.optimizer.iterations)?;
    Ok((trainer.model, trainer.log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Oracle(Tensor<f64>);

    impl X0Predictor<f64> for Oracle {
        fn predict_x0(&self, _: &Tensor<f64>, _: &Tensor<f64>, _: usize) -> Result<Tensor<f64>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn schedule_basics() {
        for n in [1, 2, 5, 20, 50] {
            let s = make_schedule(n, ScheduleKind::Cosine).unwrap();
            assert_eq!(s.alpha_bar[0], 1.0);
            assert!((s.eta[n] - 1.0).abs() < 1e-12);
            assert!(s.beta[1..].iter().all(|&b| b > 0.0 && b < 1.0));
        }
        assert!(make_schedule(0, ScheduleKind::Cosine).is_err());
        let lin = make_schedule(10, ScheduleKind::Linear).unwrap();
        assert!(lin.alpha_bar.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn strided_steps_cover_the_chain() {
        let s = make_schedule(20, ScheduleKind::Cosine).unwrap();
        assert_eq!(s.strided_steps(2).unwrap(), vec![20, 10, 0]);
        assert_eq!(s.strided_steps(1).unwrap(), vec![20, 0]);
        assert_eq!(s.strided_steps(20).unwrap(), (0..=20).rev().collect::<Vec<_>>());
        assert!(s.strided_steps(0).is_err());
        assert!(s.strided_steps(21).is_err());
    }

    #[test]
    fn forward_at_extremes() {
        let s = make_schedule(20, ScheduleKind::Cosine).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z0 = Tensor::<f64>::randn(&[1, 2, 4, 4], 1.0, &mut rng);
        let h = Tensor::<f64>::randn(&[1, 2, 4, 4], 1.0, &mut rng);
        let r = h.zip_map(&z0, |a, b| a - b);
        let eps = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng);
        assert_eq!(forward_diffuse(&z0, &r, 0, &eps, &s).unwrap(), z0);
        let zero = Tensor::zeros(z0.shape());
        let zn = forward_diffuse(&z0, &r, 20, &zero, &s).unwrap();
        let want = h.map(|v| v * s.alpha_bar[20].sqrt());
        for (a, b) in zn.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(forward_diffuse(&z0, &r, 21, &eps, &s).is_err());
    }

    #[test]
    fn oracle_sampler_recovers_target() {
        let s = make_schedule(20, ScheduleKind::Cosine).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z0 = Tensor::<f64>::randn(&[3, 2, 4, 4], 1.0, &mut rng);
        let h = Tensor::<f64>::randn(&[3, 2, 4, 4], 1.0, &mut rng);
        for steps in [1, 2, 7, 20] {
            for init in [SamplerInit::Zero, SamplerInit::Stochastic] {
                let out = sample(&h, &Oracle(z0.clone()), &s, steps, DiffusionMode::ResidualDiffusion, init, &mut rng)
                    .unwrap();
                assert_eq!(out, z0);
            }
        }
    }

    #[test]
    fn denoise_step_preconditions() {
        let s = make_schedule(5, ScheduleKind::Cosine).unwrap();
        let z = Tensor::<f64>::zeros(&[1, 2, 2, 2]);
        assert!(denoise_step(&z, &z, 3, 3, &s).is_err());
        assert!(denoise_step(&z, &z, 2, 3, &s).is_err());
    }

    #[test]
    fn unet_shapes_and_determinism() {
        let cfg = DenoiserConfig {
            base_channels: 4,
            mults: vec![1, 2],
            time_dim: 8,
        };
        let d = Denoiser::<f64>::new(cfg.clone(), 8, 4, 20, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Tensor::randn(&[2, 2, 8, 4], 1.0, &mut rng);
        let h = Tensor::randn(&[2, 2, 8, 4], 1.0, &mut rng);
        let a = d.predict(&z, &h, &[3, 17]).unwrap();
        assert_eq!(a.shape(), &[2, 2, 8, 4]);
        assert_eq!(a, d.predict(&z, &h, &[3, 17]).unwrap());
        assert!(Denoiser::<f64>::new(cfg, 5, 4, 20, 3).is_err());
    }

    #[test]
    fn weight_is_clamped_and_decreasing() {
        let s = make_schedule(20, ScheduleKind::Cosine).unwrap();
        let w: Vec<f64> = (1..=20).map(|t| s.alpha_bar[t] / (1.0 - s.alpha_bar[t])).collect();
        assert!(w.windows(2).all(|p| p[1] < p[0]));
        assert_eq!(s.loss_weight(1, 5.0), 5.0);
    }
}
