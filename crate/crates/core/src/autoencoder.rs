//! Stage 1: SNR-adaptive convolutional encoder, latent power normalization
//! with nested (MRL) rates, and the residual-block decoder.

use std::io::Write;
use std::path::Path;

use num_complex::Complex;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{self, ChannelConfig, CnrConfig};
use crate::csi_data::{CsiDataset, CsiSample, Domain, NormStats};
use crate::error::{Error, Result};
use crate::nn::optim::{Adam, OptimizerConfig};
use crate::nn::{Conv2d, Graph, Linear, ParamSet, Standardizer, Var};
use crate::quantizer::{self, QuantConfig, QuantMode, QuantSettings, ScaleTracker};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// SNR fed to the gates when the link is noiseless (`+inf`).
pub const SNR_CLAMP_DB: f64 = 50.0;

/// Inference runs in chunks of this many samples to bound memory.
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: (usize, usize),
}

impl ConvSpec {
    pub const fn new(channels: usize, k: usize) -> Self {
        Self {
            channels,
            kernel: (k, k),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthPreset {
    FourLayer,
    TwoLayer,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub preset: DepthPreset,
    /// Only read when `preset = "custom"`.
    pub layers: Vec<ConvSpec>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            preset: DepthPreset::FourLayer,
            layers: Vec::new(),
        }
    }
}

impl EncoderConfig {
    pub fn layers(&self) -> Vec<ConvSpec> {
        match self.preset {
            DepthPreset::FourLayer => vec![
                ConvSpec::new(2, 11),
                ConvSpec::new(32, 9),
                ConvSpec::new(48, 7),
                ConvSpec::new(2, 5),
            ],
            DepthPreset::TwoLayer => vec![ConvSpec::new(2, 7), ConvSpec::new(2, 7)],
            DepthPreset::Custom => self.layers.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub input_kernel: (usize, usize),
    pub n_res_blocks: usize,
    /// Convolutions inside one residual block; the last must output 2
    /// channels.
    pub block: Vec<ConvSpec>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            input_kernel: (7, 7),
            n_res_blocks: 5,
            block: vec![ConvSpec::new(16, 7), ConvSpec::new(24, 5), ConvSpec::new(2, 3)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MrlConfig {
    pub enabled: bool,
    pub rates: Vec<usize>,
    pub weights: Vec<f64>,
}

impl Default for MrlConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            rates: vec![8, 16, 32],
            weights: vec![1.0, 1.0, 1.0],
        }
    }
}

/// Architecture of the encoder/decoder pair (input size comes from data).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeArch {
    /// Complex latent dimension `k_max`.
    pub latent_k_max: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub mrl: MrlConfig,
}

impl Default for AeArch {
    fn default() -> Self {
        Self {
            latent_k_max: 32,
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            mrl: MrlConfig::default(),
        }
    }
}

impl AeArch {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.latent_k_max == 0 {
            return bad("ae.latent_k_max must be >= 1");
        }
        let layers = self.encoder.layers();
        if layers.is_empty() {
            return bad("encoder needs at least one conv layer");
        }
        let odd = |s: &ConvSpec| s.channels > 0 && s.kernel.0 % 2 == 1 && s.kernel.1 % 2 == 1;
        if !layers.iter().all(odd) || !self.decoder.block.iter().all(odd) {
            return bad("conv layers need >= 1 channel and odd kernels");
        }
        if self.decoder.input_kernel.0.is_multiple_of(2) || self.decoder.input_kernel.1.is_multiple_of(2) {
            return bad("decoder input kernel must be odd");
        }
        if self.decoder.block.last().map(|s| s.channels) != Some(2) {
            return bad("decoder residual block must end with 2 channels");
        }
        if self.mrl.enabled {
            let r = &self.mrl.rates;
            if r.is_empty() || r.windows(2).any(|w| w[0] >= w[1]) {
                return bad("ae.mrl.rates must be non-empty and strictly ascending");
            }
            if *r.last().unwrap() > self.latent_k_max || r[0] == 0 {
                return bad("ae.mrl.rates must lie in 1..=latent_k_max");
            }
            if self.mrl.weights.len() != r.len() || self.mrl.weights.iter().any(|&w| !(w >= 0.0)) {
                return bad("ae.mrl.weights must be non-negative, one per rate");
            }
        }
        Ok(())
    }

    /// Rates the model may be evaluated at.
    pub fn rates(&self) -> Vec<usize> {
        if self.mrl.enabled {
            self.mrl.rates.clone()
        } else {
            vec![self.latent_k_max]
        }
    }

    /// `(k, weight)` pairs optimized every batch.
    pub fn training_rates(&self) -> Vec<(usize, f64)> {
        if self.mrl.enabled {
            self.mrl.rates.iter().copied().zip(self.mrl.weights.iter().copied()).collect()
        } else {
            vec![(self.latent_k_max, 1.0)]
        }
    }
}

/// Per-channel gate `sigmoid(FC(relu(FC(snr_db / 10))))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SnrGate {
    fc1: Linear,
    fc2: Linear,
}

impl SnrGate {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        let hidden = (channels / 2).max(1);
        Self {
            fc1: Linear::new(params, &format!("{name}.fc1"), 1, hidden, rng),
            fc2: Linear::new(params, &format!("{name}.fc2"), hidden, channels, rng),
        }
    }

    pub fn gates<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], snr: Var) -> Var {
        let h = self.fc1.forward(g, p, snr);
        let h = g.relu(h);
        let h = self.fc2.forward(g, p, h);
        g.sigmoid(h)
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var, snr: Var) -> Var {
        let gate = self.gates(g, p, snr);
        g.mul_channel(x, gate)
    }

    /// Bias of the output layer (used to saturate gates in tests).
    pub fn output_bias(&self) -> usize {
        self.fc2.b
    }
}

/// `[B, 1]` tensor of gate inputs.
pub fn snr_features<T: Scalar>(snr_db: &[f64]) -> Tensor<T> {
    let v = snr_db
        .iter()
        .map(|&s| T::lit(s.clamp(-SNR_CLAMP_DB, SNR_CLAMP_DB) / 10.0))
        .collect();
    Tensor::from_vec(&[snr_db.len(), 1], v).expect("one feature per row")
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ResBlock {
    convs: Vec<Conv2d>,
    gate: SnrGate,
    gate_at: usize,
}

/// Complex latent with an active prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector<T> {
    pub values: Vec<Complex<T>>,
    pub k_active: usize,
}

impl<T: Scalar> LatentVector<T> {
    /// From interleaved `[re0, im0, re1, im1, ...]`.
    pub fn from_interleaved(row: &[T], k_active: usize) -> Self {
        Self {
            values: row.chunks_exact(2).map(|c| Complex::new(c[0], c[1])).collect(),
            k_active,
        }
    }

    pub fn to_interleaved(&self) -> Vec<T> {
        self.values.iter().flat_map(|z| [z.re, z.im]).collect()
    }

    /// Mean `|s_i|^2` over the active prefix.
    pub fn active_power(&self) -> f64 {
        let k = self.k_active.max(1) as f64;
        self.values[..self.k_active]
            .iter()
            .map(|z| z.norm_sqr().as_f64())
            .sum::<f64>()
            / k
    }
}

/// How the latent reaches the decoder at inference time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkOptions {
    pub k_active: usize,
    pub channel: ChannelConfig,
    pub quant: Option<QuantConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder<T> {
    pub arch: AeArch,
    pub rows: usize,
    pub cols: usize,
    pub params: ParamSet<T>,
    /// Tracked pre-companding scale for the latent quantizer.
    pub quant_scale: Option<f64>,
    /// Input standardization; the decoder applies the inverse map.
    pub input_std: Standardizer,
    enc_convs: Vec<Conv2d>,
    enc_gates: Vec<SnrGate>,
    enc_dense: Linear,
    dec_dense: Linear,
    dec_input: Conv2d,
    dec_blocks: Vec<ResBlock>,
}

impl<T: Scalar> Autoencoder<T> {
    pub fn new(arch: AeArch, rows: usize, cols: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument("CSI shape must be non-empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let plane = rows * cols;
        let mut in_ch = 2;
        let mut enc_convs = Vec::new();
        let mut enc_gates = Vec::new();
        for (i, spec) in arch.encoder.layers().iter().enumerate() {
            let name = format!("enc.conv{i}");
            enc_convs.push(Conv2d::new(&mut params, &name, in_ch, spec.channels, spec.kernel, &mut rng));
            enc_gates.push(SnrGate::new(&mut params, &format!("enc.gate{i}"), spec.channels, &mut rng));
            in_ch = spec.channels;
        }
        let latent = 2 * arch.latent_k_max;
        let enc_dense = Linear::new(&mut params, "enc.dense", in_ch * plane, latent, &mut rng);
        let dec_dense = Linear::new(&mut params, "dec.dense", latent, 2 * plane, &mut rng);
        let dec_input = Conv2d::new(&mut params, "dec.input", 2, 2, arch.decoder.input_kernel, &mut rng);
        let mut dec_blocks = Vec::new();
        for b in 0..arch.decoder.n_res_blocks {
            let mut ch = 2;
            let mut convs = Vec::new();
            for (j, spec) in arch.decoder.block.iter().enumerate() {
                let name = format!("dec.block{b}.conv{j}");
                convs.push(Conv2d::new(&mut params, &name, ch, spec.channels, spec.kernel, &mut rng));
                ch = spec.channels;
            }
            // gate the widest hidden feature map, i.e. just before the
            // output projection
            let gate_at = convs.len().saturating_sub(2);
            let gate_ch = arch.decoder.block[gate_at].channels;
            let gate = SnrGate::new(&mut params, &format!("dec.block{b}.gate"), gate_ch, &mut rng);
            dec_blocks.push(ResBlock {
                convs,
                gate,
                gate_at,
            });
        }
        Ok(Self {
            arch,
            rows,
            cols,
            params,
            quant_scale: None,
            input_std: Standardizer::default(),
            enc_convs,
            enc_gates,
            enc_dense,
            dec_dense,
            dec_input,
            dec_blocks,
        })
    }

    /// New model sized for `data`, with the input standardization fitted on
    /// it.
    pub fn for_data(arch: AeArch, data: &CsiDataset<T>, seed: u64) -> Result<Self> {
        let mut m = Self::new(arch, data.rows(), data.cols(), seed)?;
        m.input_std = Standardizer::fit(data.tensor());
        Ok(m)
    }

    pub fn cast<U: Scalar>(&self) -> Autoencoder<U> {
        Autoencoder {
            arch: self.arch.clone(),
            rows: self.rows,
            cols: self.cols,
            params: self.params.cast(),
            quant_scale: self.quant_scale,
            input_std: self.input_std,
            enc_convs: self.enc_convs.clone(),
            enc_gates: self.enc_gates.clone(),
            enc_dense: self.enc_dense,
            dec_dense: self.dec_dense,
            dec_input: self.dec_input,
            dec_blocks: self.dec_blocks.clone(),
        }
    }

    pub fn encoder_gates(&self) -> &[SnrGate] {
        &self.enc_gates
    }

    /// Parameter count of the encoder and decoder halves.
    pub fn param_counts(&self) -> (usize, usize) {
        let mut enc = 0;
        let mut dec = 0;
        for (name, t) in self.params.iter() {
            if name.starts_with("enc.") {
                enc += t.len();
            } else {
                dec += t.len();
            }
        }
        (enc, dec)
    }

    pub fn latent_width(&self) -> usize {
        2 * self.arch.latent_k_max
    }

    fn check_rate(&self, k: usize) -> Result<()> {
        if self.arch.rates().contains(&k) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "k_active {k} is not in the rate set {:?}",
                self.arch.rates()
            )))
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 2 || s[2] != self.rows || s[3] != self.cols {
            return Err(Error::Shape(format!(
                "expected [B, 2, {}, {}], got {s:?}",
                self.rows, self.cols
            )));
        }
        Ok(())
    }

    /// Encoder up to the dense output (before masking and normalization).
    pub fn encoder_graph(&self, g: &mut Graph<T>, p: &[Var], x: Var, snr: Var) -> Var {
        let mut h = self.input_std.apply_graph(g, x);
        let last = self.enc_convs.len() - 1;
        for (i, (conv, gate)) in self.enc_convs.iter().zip(&self.enc_gates).enumerate() {
            h = conv.forward(g, p, h);
            if i < last {
                h = g.relu(h);
            }
            h = gate.apply(g, p, h, snr);
        }
        let b = g.value(h).batch();
        let flat = g.value(h).per_item();
        let h = g.reshape(h, &[b, flat]);
        self.enc_dense.forward(g, p, h)
    }

    pub fn decoder_graph(&self, g: &mut Graph<T>, p: &[Var], y: Var, snr: Var) -> Var {
        let b = g.value(y).batch();
        let h = self.dec_dense.forward(g, p, y);
        let h = g.reshape(h, &[b, 2, self.rows, self.cols]);
        let mut h = self.dec_input.forward(g, p, h);
        for block in &self.dec_blocks {
            let mut a = h;
            let n = block.convs.len();
            for (j, conv) in block.convs.iter().enumerate() {
                a = conv.forward(g, p, a);
                if j + 1 < n {
                    a = g.relu(a);
                }
                if j == block.gate_at {
                    a = block.gate.apply(g, p, a, snr);
                }
            }
            h = g.add(h, a);
        }
        self.input_std.invert_graph(g, h)
    }

    /// Power-normalized latents `[B, 2 k_max]` for a normalized batch.
    pub fn encode_batch(&self, x: &Tensor<T>, snr_db: &[f64], k_active: usize) -> Result<Tensor<T>> {
        self.check_rate(k_active)?;
        self.check_input(x)?;
        if snr_db.len() != x.batch() {
            return Err(Error::Shape("one SNR per sample required".into()));
        }
        let chunks = chunked(x.batch(), |lo, hi| {
            let mut g = Graph::new();
            let p = self.params.bind_frozen(&mut g);
            let xv = g.constant(x.slice_batch(lo, hi));
            let sv = g.constant(snr_features(&snr_db[lo..hi]));
            let z = self.encoder_graph(&mut g, &p, xv, sv);
            let s = g.power_normalize(z, k_active);
            g.take_value(s)
        });
        Ok(concat_batch(&chunks))
    }

    /// Reconstruct `[B, 2, R, C]` from received latents `[B, 2 k_max]`.
    pub fn decode_batch(&self, y: &Tensor<T>, snr_db: &[f64]) -> Result<Tensor<T>> {
        let s = y.shape();
        if s.len() != 2 || s[1] != self.latent_width() {
            return Err(Error::InvalidArgument(format!(
                "latent batch must be [B, {}], got {s:?}",
                self.latent_width()
            )));
        }
        if snr_db.len() != y.batch() {
            return Err(Error::Shape("one SNR per sample required".into()));
        }
        let chunks = chunked(y.batch(), |lo, hi| {
            let mut g = Graph::new();
            let p = self.params.bind_frozen(&mut g);
            let yv = g.constant(y.slice_batch(lo, hi));
            let sv = g.constant(snr_features(&snr_db[lo..hi]));
            let out = self.decoder_graph(&mut g, &p, yv, sv);
            g.take_value(out)
        });
        Ok(concat_batch(&chunks))
    }

    pub fn encode(&self, h: &CsiSample<T>, snr_db: f64, k_active: usize) -> Result<LatentVector<T>> {
        let x = h.values.clone().reshape(&[1, 2, h.rows(), h.cols()])?;
        let s = self.encode_batch(&x, &[snr_db], k_active)?;
        Ok(LatentVector::from_interleaved(s.data(), k_active))
    }

    pub fn decode(&self, y: &LatentVector<T>, snr_db: f64) -> Result<CsiSample<T>> {
        let t = Tensor::from_vec(&[1, self.latent_width()], y.to_interleaved())
            .map_err(|_| Error::InvalidArgument("latent length must equal k_max".into()))?;
        let out = self.decode_batch(&t, &[snr_db])?;
        Ok(CsiSample {
            values: out.reshape(&[2, self.rows, self.cols])?,
            domain: Domain::Ad,
        })
    }

    /// Quantizer for this model at `bits`, using the tracked scale.
    pub fn quant_config(&self, settings: &QuantSettings, bits: u32) -> Result<QuantConfig> {
        let s_max = self.quant_scale.ok_or_else(|| {
            Error::InvalidArgument("model has no tracked latent scale for quantization".into())
        })?;
        let q = QuantConfig {
            mu: settings.mu,
            bits,
            s_max,
        };
        q.validate()?;
        Ok(q)
    }

    /// Full stage-1 path: encode, (quantize), transmit, decode, all at
    /// `link.channel.snr_db`.
    pub fn reconstruct<R: Rng + ?Sized>(
        &self,
        x: &Tensor<T>,
        link: &LinkOptions,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        let snr = vec![link.channel.snr_db; x.batch()];
        self.reconstruct_at(x, &snr, link, rng)
    }

    /// Like [`reconstruct`](Self::reconstruct) with one SNR per sample.
    pub fn reconstruct_at<R: Rng + ?Sized>(
        &self,
        x: &Tensor<T>,
        snr_db: &[f64],
        link: &LinkOptions,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        let mut s = self.encode_batch(x, snr_db, link.k_active)?;
        if let Some(q) = &link.quant {
            let (off, _) = quantizer::quantization_offset(&s, link.k_active, q);
            s.add_assign(&off);
        }
        let noise = channel::feedback_perturbation(
            &Tensor::<T>::zeros(s.shape()),
            link.k_active,
            snr_db,
            &link.channel,
            rng,
        );
        s.add_assign(&noise);
        self.decode_batch(&s, snr_db)
    }
}

fn chunked<T: Scalar>(n: usize, mut f: impl FnMut(usize, usize) -> Tensor<T>) -> Vec<Tensor<T>> {
    (0..n.div_ceil(CHUNK))
        .map(|c| f(c * CHUNK, ((c + 1) * CHUNK).min(n)))
        .collect()
}

fn concat_batch<T: Scalar>(parts: &[Tensor<T>]) -> Tensor<T> {
    Tensor::concat(parts).expect("uniform chunk shapes")
}

/// Squared Frobenius norm of `h - h_hat`, summed over both planes.
pub fn mse_loss<T: Scalar>(h: &Tensor<T>, h_hat: &Tensor<T>) -> Result<f64> {
    if h.shape() != h_hat.shape() {
        return Err(Error::Shape(format!(
            "mse_loss shapes differ: {:?} vs {:?}",
            h.shape(),
            h_hat.shape()
        )));
    }
    Ok(h.data()
        .iter()
        .zip(h_hat.data())
        .map(|(&a, &b)| (a - b).as_f64().powi(2))
        .sum())
}

/// `sum_i w_i * mse(h, h_hat_i)`.
pub fn mrl_loss<T: Scalar>(h: &Tensor<T>, recs: &[Tensor<T>], mrl: &MrlConfig) -> Result<f64> {
    if recs.len() != mrl.rates.len() || mrl.weights.len() != mrl.rates.len() {
        return Err(Error::InvalidArgument(format!(
            "{} reconstructions for {} rates",
            recs.len(),
            mrl.rates.len()
        )));
    }
    let mut total = 0.0;
    for (r, &w) in recs.iter().zip(&mrl.weights) {
        total += w * mse_loss(h, r)?;
    }
    Ok(total)
}

/// One rate's contribution to a training batch.
#[derive(Debug, Clone)]
pub struct RateTerm<T> {
    pub k: usize,
    pub weight: f64,
    /// Additive channel perturbation `[B, 2 k_max]` (zero beyond `k`).
    pub perturbation: Tensor<T>,
}

/// Everything random about one training step, drawn up front so the loss is
/// a deterministic function of the parameters.
#[derive(Debug, Clone)]
pub struct AeBatch<T> {
    pub input: Tensor<T>,
    pub target: Tensor<T>,
    pub snr_db: Vec<f64>,
    pub rates: Vec<RateTerm<T>>,
}

/// Loss value and gradients for one batch.
#[derive(Debug, Clone)]
pub struct AeStep<T> {
    /// `sum_i w_i * mean_b ||H - H_hat_i||^2`.
    pub loss: f64,
    /// Mean per-sample squared error for each rate.
    pub per_rate: Vec<f64>,
    pub grads: Vec<Tensor<T>>,
    /// Normalized latents at the largest rate before quantization (for scale
    /// tracking).
    pub latents: Tensor<T>,
    pub clipped: usize,
}

impl<T: Scalar> Autoencoder<T> {
    /// Forward and backward pass. With `quant`, the latent goes through the
    /// quantizer with a straight-through gradient.
    pub fn batch_loss(&self, batch: &AeBatch<T>, quant: Option<&QuantConfig>) -> AeStep<T> {
        let n = batch.input.batch();
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = g.constant(batch.input.clone());
        let snr = g.constant(snr_features(&batch.snr_db));
        let z = self.encoder_graph(&mut g, &p, x, snr);
        let mut terms = Vec::new();
        let mut latents = None;
        let mut clipped = 0;
        for rt in &batch.rates {
            let mut s = g.power_normalize(z, rt.k);
            // The scale tracker must see the pre-quantization latent: quantized
            // values never exceed s_max, so tracking them shrinks the scale.
            latents = Some(g.value(s).clone());
            if let Some(q) = quant {
                let (off, c) = quantizer::quantization_offset(g.value(s), rt.k, q);
                clipped += c;
                let off = g.constant(off);
                s = g.add(s, off);
            }
            let noise = g.constant(rt.perturbation.clone());
            let y = g.add(s, noise);
            let out = self.decoder_graph(&mut g, &p, y, snr);
            let w = T::lit(rt.weight / n as f64);
            let sse = g.weighted_sse(out, batch.target.clone(), vec![w; n]);
            terms.push(sse);
        }
        let per_rate: Vec<f64> = terms
            .iter()
            .zip(&batch.rates)
            .map(|(&t, rt)| {
                let v = g.value(t).data()[0].as_f64();
                if rt.weight > 0.0 {
                    v / rt.weight
                } else {
                    f64::NAN
                }
            })
            .collect();
        let mut loss = terms[0];
        for &t in &terms[1..] {
            loss = g.add(loss, t);
        }
        let loss_val = g.value(loss).data()[0].as_f64();
        g.backward(loss);
        AeStep {
            loss: loss_val,
            per_rate,
            grads: self.params.grads(&g, &p),
            latents: latents.expect("at least one rate"),
            clipped,
        }
    }
}

/// Estimation-error injection used while training or testing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheSetup {
    pub cnr: CnrConfig,
    /// Maps normalized values back to physical units.
    pub stats: NormStats,
    /// Dataset mean entry power in physical units.
    pub mean_power: f64,
}

impl CheSetup {
    pub fn perfect() -> Self {
        Self {
            cnr: CnrConfig::PERFECT,
            stats: NormStats::identity(),
            mean_power: 1.0,
        }
    }

    /// Apply to a normalized batch: denormalize, inject, renormalize.
    pub fn corrupt<T: Scalar, R: Rng + ?Sized>(&self, x: &Tensor<T>, rng: &mut R) -> Tensor<T> {
        if self.cnr.is_perfect() {
            return x.clone();
        }
        let phys = self.stats.invert(x);
        let noisy = channel::inject_batch(&phys, &self.cnr, self.mean_power, rng);
        self.stats.apply(&noisy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AeTrainOptions {
    pub optimizer: OptimizerConfig,
    pub channel: ChannelConfig,
    pub quant: QuantSettings,
    /// With quantization active, train over a noiseless link.
    pub quant_noiseless_link: bool,
    pub che: CheSetup,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AeLogRow {
    pub iteration: usize,
    pub loss: f64,
    pub per_rate: Vec<f64>,
    pub lr: f64,
    pub grad_norm: f64,
    pub clip_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub rates: Vec<usize>,
    pub rows: Vec<AeLogRow>,
}

impl TrainLog {
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
            write!(f, "iteration,loss")?;
            for k in &self.rates {
                write!(f, ",mse_k{k}")?;
            }
            writeln!(f, ",lr,grad_norm,clip_rate")?;
        }
        for r in &self.rows {
            write!(f, "{},{:e}", r.iteration, r.loss)?;
            for v in &r.per_rate {
                write!(f, ",{v:e}")?;
            }
            writeln!(f, ",{:e},{:e},{:e}", r.lr, r.grad_norm, r.clip_rate)?;
        }
        f.flush()?;
        Ok(())
    }

    /// Mean loss over the first / last `n` logged iterations.
    pub fn head_tail_mean(&self, n: usize) -> (f64, f64) {
        let n = n.min(self.rows.len()).max(1);
        let mean = |rows: &[AeLogRow]| rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64;
        (
            mean(&self.rows[..n]),
            mean(&self.rows[self.rows.len() - n..]),
        )
    }
}

/// Resumable stage-1 training state.
#[derive(Debug, Clone)]
pub struct AeTrainer<T> {
    pub model: Autoencoder<T>,
    pub adam: Adam<T>,
    pub iteration: usize,
    pub scale: ScaleTracker,
    pub log: TrainLog,
}

/// Fresh RNG for iteration `it`, so resumed runs replay the same draws.
pub fn iteration_rng(seed: u64, it: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(it as u64 + 1);
    rng
}

impl<T: Scalar> AeTrainer<T> {
    pub fn new(model: Autoencoder<T>, opts: &AeTrainOptions) -> Self {
        let adam = Adam::new(opts.optimizer, &model.params);
        let rates = model.arch.training_rates().iter().map(|r| r.0).collect();
        Self {
            model,
            adam,
            iteration: 0,
            scale: ScaleTracker::new(opts.quant.scale_decay),
            log: TrainLog {
                rates,
                rows: Vec::new(),
            },
        }
    }

    fn draw_batch(&self, data: &CsiDataset<T>, opts: &AeTrainOptions, rng: &mut ChaCha8Rng) -> AeBatch<T> {
        let bs = opts.optimizer.batch_size.min(data.len());
        let idx = sample_indices(rng, data.len(), bs).into_vec();
        let target = data.batch(&idx);
        let input = opts.che.corrupt(&target, rng);
        let noiseless = opts.quant.enabled && opts.quant_noiseless_link;
        let snr_db: Vec<f64> = (0..bs)
            .map(|_| {
                if noiseless {
                    f64::INFINITY
                } else {
                    channel::sample_training_snr(opts.channel.train_snr_range_db, rng)
                }
            })
            .collect();
        let zeros = Tensor::<T>::zeros(&[bs, self.model.latent_width()]);
        let rates = self
            .model
            .arch
            .training_rates()
            .into_iter()
            .map(|(k, weight)| RateTerm {
                k,
                weight,
                perturbation: channel::feedback_perturbation(&zeros, k, &snr_db, &opts.channel, rng),
            })
            .collect();
        AeBatch {
            input,
            target,
            snr_db,
            rates,
        }
    }

    /// Run until `self.iteration == until`.
    pub fn train(&mut self, data: &CsiDataset<T>, opts: &AeTrainOptions, until: usize) -> Result<()> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        if data.rows() != self.model.rows || data.cols() != self.model.cols {
            return Err(Error::Shape("dataset shape does not match the model".into()));
        }
        let ste = opts.quant.enabled && opts.quant.mode == QuantMode::Ste;
        while self.iteration < until {
            let mut rng = iteration_rng(opts.seed, self.iteration);
            let batch = self.draw_batch(data, opts, &mut rng);
            let q = match (ste, self.scale.value) {
                (true, Some(s)) => Some(QuantConfig {
                    mu: opts.quant.mu,
                    bits: opts.quant.bits,
                    s_max: s,
                }),
                _ => None,
            };
            let mut step = self.model.batch_loss(&batch, q.as_ref());
            if !step.loss.is_finite() || step.grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Diverged {
                    iteration: self.iteration,
                    detail: format!(
                        "loss {} per-rate {:?} lr {:.3e}",
                        step.loss,
                        step.per_rate,
                        self.adam.current_lr()
                    ),
                });
            }
            let k_top = batch.rates.last().map(|r| r.k).unwrap_or(0);
            let s_max = self.scale.observe(&step.latents, k_top);
            self.model.quant_scale = Some(s_max);
            let lr = self.adam.current_lr();
            let grad_norm = self.adam.update(&mut self.model.params, &mut step.grads);
            let sent: usize = batch.rates.iter().map(|r| 2 * r.k * batch.input.batch()).sum();
            self.log.rows.push(AeLogRow {
                iteration: self.iteration,
                loss: step.loss,
                per_rate: step.per_rate,
                lr,
                grad_norm,
                clip_rate: step.clipped as f64 / sent.max(1) as f64,
            });
            self.iteration += 1;
        }
        Ok(())
    }
}

/// Train a fresh model for `opts.optimizer.iterations` steps.
pub fn train_autoencoder<T: Scalar>(
    data: &CsiDataset<T>,
    arch: &AeArch,
    opts: &AeTrainOptions,
) -> Result<(Autoencoder<T>, TrainLog)> {
    let model = Autoencoder::for_data(arch.clone(), data, opts.seed)?;
    let mut trainer = AeTrainer::new(model, opts);
    trainer.train(data, opts, opts.optimizer.iterations)?;
    Ok((trainer.model, trainer.log))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_arch() -> AeArch {
        AeArch {
            latent_k_max: 4,
            encoder: EncoderConfig {
                preset: DepthPreset::TwoLayer,
                layers: vec![],
            },
            decoder: DecoderConfig {
                input_kernel: (3, 3),
                n_res_blocks: 1,
                block: vec![ConvSpec::new(3, 3), ConvSpec::new(2, 3)],
            },
            mrl: MrlConfig {
                enabled: true,
                rates: vec![2, 4],
                weights: vec![1.0, 1.0],
            },
        }
    }

    fn input(n: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        Tensor::uniform(&[n, 2, 6, 6], 1.0, &mut rng)
    }

    #[test]
    fn presets_match_layer_tables() {
        let four = EncoderConfig::default().layers();
        let ch: Vec<usize> = four.iter().map(|s| s.channels).collect();
        let k: Vec<usize> = four.iter().map(|s| s.kernel.0).collect();
        assert_eq!(ch, vec![2, 32, 48, 2]);
        assert_eq!(k, vec![11, 9, 7, 5]);
        let two = EncoderConfig {
            preset: DepthPreset::TwoLayer,
            layers: vec![],
        };
        assert_eq!(two.layers(), vec![ConvSpec::new(2, 7); 2]);
    }

    #[test]
    fn latent_is_masked_and_normalized() {
        let ae = Autoencoder::<f64>::new(tiny_arch(), 6, 6, 1).unwrap();
        let x = input(3);
        let s = ae.encode_batch(&x, &[0.0, 5.0, 10.0], 2).unwrap();
        for b in 0..3 {
            let lat = LatentVector::from_interleaved(s.item(b), 2);
            assert!((lat.active_power() - 1.0).abs() < 1e-9);
            assert!(lat.values[2..].iter().all(|z| z.re == 0.0 && z.im == 0.0));
        }
        assert!(matches!(
            ae.encode_batch(&x, &[0.0; 3], 3),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn nested_prefixes_share_direction() {
        let ae = Autoencoder::<f64>::new(tiny_arch(), 6, 6, 2).unwrap();
        let x = input(1);
        let s2 = ae.encode_batch(&x, &[3.0], 2).unwrap();
        let s4 = ae.encode_batch(&x, &[3.0], 4).unwrap();
        // same pre-normalization code, different scaling of the prefix
        let r = s2.data()[0] / s4.data()[0];
        for i in 0..4 {
            assert!((s2.data()[i] - r * s4.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_shape_and_determinism() {
        let ae = Autoencoder::<f64>::new(tiny_arch(), 6, 6, 1).unwrap();
        let x = input(1);
        let sample = CsiSample {
            values: x.clone().reshape(&[2, 6, 6]).unwrap(),
            domain: Domain::Ad,
        };
        let lat = ae.encode(&sample, 5.0, 4).unwrap();
        let a = ae.decode(&lat, 5.0).unwrap();
        let b = ae.decode(&lat, 5.0).unwrap();
        assert_eq!(a.values.shape(), &[2, 6, 6]);
        assert_eq!(a, b);
        let short = LatentVector {
            values: vec![Complex::new(0.0, 0.0); 3],
            k_active: 3,
        };
        assert!(ae.decode(&short, 5.0).is_err());
    }

    #[test]
    fn saturated_gate_is_identity() {
        let mut ae = Autoencoder::<f64>::new(tiny_arch(), 6, 6, 1).unwrap();
        let gate = ae.encoder_gates()[0];
        let bias = gate.output_bias();
        ae.params.get_mut(bias).data_mut().iter_mut().for_each(|v| *v = 60.0);
        let mut g = Graph::new();
        let p = ae.params.bind_frozen(&mut g);
        let x = Tensor::uniform(&[2, 2, 6, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        let xv = g.constant(x.clone());
        let snr = g.constant(snr_features::<f64>(&[0.0, 7.0]));
        let out = gate.apply(&mut g, &p, xv, snr);
        for (a, b) in g.value(out).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_examples() {
        let h = Tensor::<f64>::zeros(&[2, 32, 32]);
        let h1 = h.map(|v| v + 1.0);
        assert_eq!(mse_loss(&h, &h1).unwrap(), 2048.0);
        assert_eq!(mse_loss(&h1, &h).unwrap(), 2048.0);
        assert_eq!(mse_loss(&h, &h).unwrap(), 0.0);
        assert!(mse_loss(&h, &Tensor::zeros(&[2, 4])).is_err());

        let a = Tensor::from_vec(&[3], vec![0.0f64, 0.0, 0.0]).unwrap();
        let r3 = Tensor::from_vec(&[3], vec![1.0, 1.0, 1.0]).unwrap();
        let r5 = Tensor::from_vec(&[3], vec![2.0, 1.0, 0.0]).unwrap();
        let mrl = MrlConfig {
            enabled: true,
            rates: vec![1, 2],
            weights: vec![1.0, 2.0],
        };
        assert_eq!(mrl_loss(&a, &[r3.clone(), r5], &mrl).unwrap(), 13.0);
        assert!(mrl_loss(&a, &[r3], &mrl).is_err());
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = CsiDataset::from_tensor(Tensor::uniform(&[16, 2, 6, 6], 1.0, &mut rng), Domain::Ad).unwrap();
        let opts = AeTrainOptions {
            optimizer: OptimizerConfig {
                iterations: 6,
                batch_size: 4,
                ..Default::default()
            },
            channel: ChannelConfig::default(),
            quant: QuantSettings::default(),
            quant_noiseless_link: true,
            che: CheSetup::perfect(),
            seed: 11,
        };
        let (m1, l1) = train_autoencoder::<f64>(&data, &tiny_arch(), &opts).unwrap();
        let (m2, l2) = train_autoencoder::<f64>(&data, &tiny_arch(), &opts).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(m1.params, m2.params);

        let model = Autoencoder::for_data(tiny_arch(), &data, 11).unwrap();
        let mut t = AeTrainer::new(model, &opts);
        t.train(&data, &opts, 3).unwrap();
        t.train(&data, &opts, 6).unwrap();
        assert_eq!(t.log, l1);
    }

    #[test]
    fn ste_training_tracks_the_unquantized_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = CsiDataset::from_tensor(Tensor::uniform(&[16, 2, 6, 6], 1.0, &mut rng), Domain::Ad).unwrap();
        let opts = AeTrainOptions {
            optimizer: OptimizerConfig {
                iterations: 40,
                batch_size: 4,
                ..Default::default()
            },
            channel: ChannelConfig::default(),
            quant: QuantSettings {
                enabled: true,
                mu: 50.0,
                bits: 2,
                mode: QuantMode::Ste,
                scale_decay: 0.5,
            },
            quant_noiseless_link: true,
            che: CheSetup::perfect(),
            seed: 12,
        };
        let (model, _) = train_autoencoder::<f64>(&data, &tiny_arch(), &opts).unwrap();
        let s = model.encode_batch(&data.batch(&(0..16).collect::<Vec<_>>()), &[f64::INFINITY; 16], 4).unwrap();
        let peak = s.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        // Tracking quantized values would shrink the scale by the top level's
        // ratio every step and end orders of magnitude below the peak.
        let scale = model.quant_scale.unwrap();
        assert!(scale > 0.25 * peak && scale <= peak * 1.0001, "scale {scale} peak {peak}");
    }
}
