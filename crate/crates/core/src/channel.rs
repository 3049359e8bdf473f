//! Uplink feedback channel and imperfect downlink estimation at the UE.

use num_complex::Complex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::csi_data::{CsiDataset, CsiSample};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    Awgn,
    RayleighMrc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    pub mode: ChannelMode,
    /// Evaluation SNR; `inf` means a noiseless link.
    pub snr_db: f64,
    pub mrc_branches: usize,
    pub train_snr_range_db: (f64, f64),
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            mode: ChannelMode::Awgn,
            snr_db: 5.0,
            mrc_branches: 32,
            train_snr_range_db: (-5.0, 10.0),
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(Error::InvalidArgument("channel.snr_db must be finite or +inf".into()));
        }
        if self.mrc_branches < 1 {
            return Err(Error::InvalidArgument("channel.mrc_branches must be >= 1".into()));
        }
        let (lo, hi) = self.train_snr_range_db;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::InvalidArgument(
                "channel.train_snr_range_db must be a finite (low, high) with low <= high".into(),
            ));
        }
        Ok(())
    }
}

/// Channel-to-noise ratio of the UE's downlink estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnrConfig {
    /// `inf` denotes perfect CSI.
    pub cnr_db: f64,
}

impl CnrConfig {
    pub const PERFECT: CnrConfig = CnrConfig {
        cnr_db: f64::INFINITY,
    };

    pub fn is_perfect(&self) -> bool {
        self.cnr_db == f64::INFINITY
    }
}

impl Default for CnrConfig {
    fn default() -> Self {
        Self::PERFECT
    }
}

/// Noise variance per complex entry at unit signal power.
pub fn noise_variance(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

fn cgauss<T: Scalar, R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex<T> {
    let s = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex::new(T::lit(re * s), T::lit(im * s))
}

/// Scale `s` to unit average power `(1/k) sum |s_i|^2 = 1`.
pub fn power_normalize<T: Scalar>(s: &[Complex<T>]) -> Result<Vec<Complex<T>>> {
    let p: T = s.iter().map(|z| z.norm_sqr()).sum();
    if !(p > T::zero()) {
        return Err(Error::Degenerate("cannot power-normalize a zero vector".into()));
    }
    let c = (T::lit(s.len() as f64) / p).sqrt();
    Ok(s.iter().map(|z| z * c).collect())
}

/// Uniform draw in `[low, high]` dB.
pub fn sample_training_snr<R: Rng + ?Sized>(range_db: (f64, f64), rng: &mut R) -> f64 {
    let (lo, hi) = range_db;
    if lo == hi {
        return lo;
    }
    rng.gen_range(lo..=hi)
}

/// Output of [`transmit_detailed`]: the received symbols and, per symbol, the
/// combining gain `sum_j |h_j|^2` (1 for AWGN).
#[derive(Debug, Clone)]
pub struct Received<T> {
    pub symbols: Vec<Complex<T>>,
    pub gains: Vec<f64>,
}

/// Send `s` over the configured link at `snr_db`.
pub fn transmit_detailed<T: Scalar, R: Rng + ?Sized>(
    s: &[Complex<T>],
    mode: ChannelMode,
    mrc_branches: usize,
    snr_db: f64,
    rng: &mut R,
) -> Received<T> {
    if snr_db == f64::INFINITY {
        return Received {
            symbols: s.to_vec(),
            gains: vec![1.0; s.len()],
        };
    }
    let var = noise_variance(snr_db);
    match mode {
        ChannelMode::Awgn => Received {
            symbols: s.iter().map(|&x| x + cgauss::<T, _>(rng, var)).collect(),
            gains: vec![1.0; s.len()],
        },
        ChannelMode::RayleighMrc => {
            let mut symbols = Vec::with_capacity(s.len());
            let mut gains = Vec::with_capacity(s.len());
            for &x in s {
                let mut num = Complex::new(0.0f64, 0.0);
                let mut gain = 0.0;
                let xf = Complex::new(x.re.as_f64(), x.im.as_f64());
                for _ in 0..mrc_branches {
                    let h: Complex<f64> = cgauss(rng, 1.0);
                    let n: Complex<f64> = cgauss(rng, var);
                    num += h.conj() * (h * xf + n);
                    gain += h.norm_sqr();
                }
                let y = num / gain;
                symbols.push(Complex::new(T::lit(y.re), T::lit(y.im)));
                gains.push(gain);
            }
            Received { symbols, gains }
        }
    }
}

/// Send `s` at `config.snr_db`.
pub fn transmit<T: Scalar, R: Rng + ?Sized>(
    s: &[Complex<T>],
    config: &ChannelConfig,
    rng: &mut R,
) -> Vec<Complex<T>> {
    transmit_detailed(s, config.mode, config.mrc_branches, config.snr_db, rng).symbols
}

/// Additive channel perturbation for a batch of interleaved latents
/// `[B, 2K]`: only the first `active` complex entries are sent, the rest of
/// the returned tensor is zero. One SNR per row.
pub fn feedback_perturbation<T: Scalar, R: Rng + ?Sized>(
    latents: &Tensor<T>,
    active: usize,
    snr_db: &[f64],
    config: &ChannelConfig,
    rng: &mut R,
) -> Tensor<T> {
    let mut out = Tensor::zeros(latents.shape());
    for (b, &snr) in snr_db.iter().enumerate() {
        let row = latents.item(b);
        let s: Vec<Complex<T>> = (0..active)
            .map(|i| Complex::new(row[2 * i], row[2 * i + 1]))
            .collect();
        let y = transmit_detailed(&s, config.mode, config.mrc_branches, snr, rng).symbols;
        let dst = out.item_mut(b);
        for (i, (yi, si)) in y.iter().zip(&s).enumerate() {
            dst[2 * i] = yi.re - si.re;
            dst[2 * i + 1] = yi.im - si.im;
        }
    }
    out
}

/// `H~ = H + E` with `E` i.i.d. complex Gaussian of variance
/// `mean_power * 10^(-cnr/10)` per entry.
pub fn inject_estimation_error<T: Scalar, R: Rng + ?Sized>(
    h: &CsiSample<T>,
    cnr: &CnrConfig,
    mean_power: f64,
    rng: &mut R,
) -> CsiSample<T> {
    if cnr.is_perfect() {
        return h.clone();
    }
    let var = mean_power * 10f64.powf(-cnr.cnr_db / 10.0);
    let s = T::lit((var / 2.0).sqrt());
    let values = h.values.map(|v| {
        let z: f64 = StandardNormal.sample(rng);
        v + T::lit(z) * s
    });
    CsiSample {
        values,
        domain: h.domain,
    }
}

/// Apply [`inject_estimation_error`] to every sample of a (physical-unit)
/// dataset.
pub fn inject_dataset<T: Scalar, R: Rng + ?Sized>(
    dataset: &CsiDataset<T>,
    cnr: &CnrConfig,
    mean_power: f64,
    rng: &mut R,
) -> CsiDataset<T> {
    if cnr.is_perfect() {
        return dataset.clone();
    }
    let var = mean_power * 10f64.powf(-cnr.cnr_db / 10.0);
    let s = T::lit((var / 2.0).sqrt());
    let t = dataset.tensor().map(|v| {
        let z: f64 = StandardNormal.sample(rng);
        v + T::lit(z) * s
    });
    CsiDataset::from_tensor(t, dataset.domain()).expect("same shape")
}

/// Same as [`inject_dataset`] on a raw `[B, 2, R, C]` batch.
pub fn inject_batch<T: Scalar, R: Rng + ?Sized>(
    batch: &Tensor<T>,
    cnr: &CnrConfig,
    mean_power: f64,
    rng: &mut R,
) -> Tensor<T> {
    if cnr.is_perfect() {
        return batch.clone();
    }
    let var = mean_power * 10f64.powf(-cnr.cnr_db / 10.0);
    let s = T::lit((var / 2.0).sqrt());
    batch.map(|v| {
        let z: f64 = StandardNormal.sample(rng);
        v + T::lit(z) * s
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csi_data::Domain;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type C = Complex<f64>;

    #[test]
    fn power_normalize_examples() {
        let ones = vec![C::new(1.0, 0.0); 6];
        assert_eq!(power_normalize(&ones).unwrap(), ones);
        let s = vec![C::new(2.0, 0.0), C::new(0.0, 0.0), C::new(0.0, 0.0), C::new(0.0, 0.0)];
        let y = power_normalize(&s).unwrap();
        assert!((y[0] - C::new(2.0, 0.0)).norm() < 1e-15);
        assert!(matches!(
            power_normalize(&[C::new(0.0, 0.0); 3]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn power_normalize_is_idempotent() {
        let s: Vec<C> = (0..9).map(|i| C::new(i as f64 - 3.0, 0.5 * i as f64)).collect();
        let a = power_normalize(&s).unwrap();
        let b = power_normalize(&a).unwrap();
        let p: f64 = a.iter().map(|z| z.norm_sqr()).sum::<f64>() / 9.0;
        assert!((p - 1.0).abs() < 1e-12);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).norm() < 1e-12);
        }
    }

    #[test]
    fn noiseless_sentinel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = vec![C::new(0.3, -1.0), C::new(1.2, 0.1)];
        for mode in [ChannelMode::Awgn, ChannelMode::RayleighMrc] {
            let cfg = ChannelConfig {
                mode,
                snr_db: f64::INFINITY,
                ..Default::default()
            };
            assert_eq!(transmit(&s, &cfg, &mut rng), s);
        }
    }

    #[test]
    fn training_snr_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_training_snr((5.0, 5.0), &mut rng), 5.0);
        let a: Vec<f64> = {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            (0..5).map(|_| sample_training_snr((-5.0, 10.0), &mut r)).collect()
        };
        let b: Vec<f64> = {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            (0..5).map(|_| sample_training_snr((-5.0, 10.0), &mut r)).collect()
        };
        assert_eq!(a, b);
        let n = 100_000;
        let mean = (0..n)
            .map(|_| sample_training_snr((-5.0, 10.0), &mut rng))
            .sum::<f64>()
            / n as f64;
        assert!((mean - 2.5).abs() < 0.1, "mean {mean}");
    }

    #[test]
    fn higher_snr_means_less_distortion() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = vec![C::new(1.0, 0.0); 20_000];
        let mut last = f64::INFINITY;
        for snr in [0.0, 5.0, 10.0] {
            let cfg = ChannelConfig {
                snr_db: snr,
                ..Default::default()
            };
            let y = transmit(&s, &cfg, &mut rng);
            let err: f64 = y.iter().zip(&s).map(|(a, b)| (a - b).norm_sqr()).sum();
            assert!(err < last);
            last = err;
        }
    }

    #[test]
    fn perfect_cnr_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = CsiSample {
            values: Tensor::randn(&[2, 4, 4], 1.0, &mut rng),
            domain: Domain::Ad,
        };
        let out = inject_estimation_error(&h, &CnrConfig::PERFECT, 1.0, &mut rng);
        assert_eq!(out, h);
    }

    #[test]
    fn perturbation_leaves_inactive_entries_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lat = Tensor::<f64>::randn(&[3, 16], 1.0, &mut rng);
        let cfg = ChannelConfig::default();
        let n = feedback_perturbation(&lat, 4, &[0.0, 5.0, 10.0], &cfg, &mut rng);
        for b in 0..3 {
            assert!(n.item(b)[8..].iter().all(|&v| v == 0.0));
            assert!(n.item(b)[..8].iter().any(|&v| v != 0.0));
        }
    }
}
