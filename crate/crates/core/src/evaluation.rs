//! NMSE and uncoded BLER metrics, evaluation sweeps, and throughput timing.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use num_complex::Complex;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autoencoder::{iteration_rng, Autoencoder, CheSetup, LinkOptions};
use crate::channel::{ChannelConfig, CnrConfig};
use crate::csi_data::{ad_to_sf, CMatrix, CsiDataset, Domain, NormStats};
use crate::diffusion::{Denoiser, DiffusionMode, DiffusionSchedule, SamplerInit};
use crate::error::{Error, Result};
use crate::quantizer::QuantSettings;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Reported value for an exact reconstruction.
pub const NMSE_FLOOR_DB: f64 = -120.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NmseConvention {
    /// `E[|z - z^|^2 / |z|^2]`.
    #[default]
    Squared,
    /// `E[|z - z^| / |z|]`, kept for comparison only.
    Unsquared,
}

/// NMSE in dB between batches `[B, ...]`, averaged per sample. Both inputs
/// must already be in physical units.
pub fn nmse_db<T: Scalar>(z: &Tensor<T>, z_hat: &Tensor<T>) -> Result<f64> {
    nmse_db_with(z, z_hat, NmseConvention::Squared)
}

pub fn nmse_db_with<T: Scalar>(
    z: &Tensor<T>,
    z_hat: &Tensor<T>,
    convention: NmseConvention,
) -> Result<f64> {
    if z.shape() != z_hat.shape() {
        return Err(Error::Shape(format!(
            "nmse shapes differ: {:?} vs {:?}",
            z.shape(),
            z_hat.shape()
        )));
    }
    let b = z.batch();
    if b == 0 {
        return Err(Error::InvalidArgument("nmse of an empty batch".into()));
    }
    let mut acc = 0.0;
    for i in 0..b {
        let (a, r) = (z.item(i), z_hat.item(i));
        let num: f64 = a
            .iter()
            .zip(r)
            .map(|(&p, &q)| (p.as_f64() - q.as_f64()).powi(2))
            .sum();
        let den: f64 = a.iter().map(|&p| p.as_f64().powi(2)).sum();
        if !(den > 0.0) {
            return Err(Error::Degenerate(format!("nmse reference sample {i} is zero")));
        }
        acc += match convention {
            NmseConvention::Squared => num / den,
            NmseConvention::Unsquared => (num / den).sqrt(),
        };
    }
    Ok(ratio_to_db(acc / b as f64))
}

fn ratio_to_db(r: f64) -> f64 {
    if r > 0.0 {
        (10.0 * r.log10()).max(NMSE_FLOOR_DB)
    } else {
        NMSE_FLOOR_DB
    }
}

/// Denormalize both batches with `stats`, then [`nmse_db`].
pub fn nmse_db_physical<T: Scalar>(
    z_norm: &Tensor<T>,
    z_hat_norm: &Tensor<T>,
    stats: &NormStats,
) -> Result<f64> {
    nmse_db(&stats.invert(z_norm), &stats.invert(z_hat_norm))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlerResult {
    pub bler: f64,
    pub symbol_error_rate: f64,
    pub blocks: usize,
    pub symbols: usize,
    /// Subcarriers skipped because the reconstruction row had zero norm.
    pub skipped: usize,
}

fn qpsk(bits: u8) -> Complex<f64> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let re = if bits & 1 == 0 { s } else { -s };
    let im = if bits & 2 == 0 { s } else { -s };
    Complex::new(re, im)
}

/// Uncoded block error rate of single-stream MRT on SF-domain channels.
///
/// On subcarrier `r`, the precoder `w = conj(h_rec) / |h_rec|` is formed from
/// the reconstruction and a unit-energy QPSK symbol is sent through the true
/// channel with complex noise of variance `10^(-dl_snr_db/10)`. The receiver
/// knows the effective scalar gain `h_true . w` and hard-detects. Block `b`
/// uses sample `b mod len` and spans every subcarrier times
/// `symbols_per_block` symbols; it errs if any symbol errs.
pub fn bler_uncoded<T: Scalar, R: Rng + ?Sized>(
    h_true_sf: &[CMatrix<T>],
    h_rec_sf: &[CMatrix<T>],
    dl_snr_db: f64,
    symbols_per_block: usize,
    n_blocks: usize,
    rng: &mut R,
) -> Result<BlerResult> {
    if h_true_sf.len() != h_rec_sf.len() || h_true_sf.is_empty() {
        return Err(Error::InvalidArgument(
            "bler needs equally many, non-zero true and reconstructed channels".into(),
        ));
    }
    if symbols_per_block == 0 || n_blocks == 0 {
        return Err(Error::InvalidArgument("bler needs at least one symbol and block".into()));
    }
    if dl_snr_db.is_nan() {
        return Err(Error::InvalidArgument("downlink SNR is NaN".into()));
    }
    let sigma = (10f64.powf(-dl_snr_db / 10.0) / 2.0).sqrt();
    let mut res = BlerResult {
        bler: 0.0,
        symbol_error_rate: 0.0,
        blocks: n_blocks,
        symbols: 0,
        skipped: 0,
    };
    let (mut block_errors, mut symbol_errors) = (0usize, 0usize);
    for b in 0..n_blocks {
        let (ht, hr) = (&h_true_sf[b % h_true_sf.len()], &h_rec_sf[b % h_rec_sf.len()]);
        if ht.rows != hr.rows || ht.cols != hr.cols {
            return Err(Error::Shape("bler channel shapes differ".into()));
        }
        let mut block_err = false;
        for r in 0..ht.rows {
            let rec = hr.row(r);
            let norm = rec.iter().map(|z| z.norm_sqr().as_f64()).sum::<f64>().sqrt();
            if !(norm > 0.0) {
                res.skipped += 1;
                continue;
            }
            let gain: Complex<f64> = ht
                .row(r)
                .iter()
                .zip(rec)
                .map(|(h, w)| {
                    Complex::new(h.re.as_f64(), h.im.as_f64())
                        * Complex::new(w.re.as_f64(), -w.im.as_f64())
                })
                .sum::<Complex<f64>>()
                / norm;
            for _ in 0..symbols_per_block {
                let bits: u8 = rng.gen_range(0..4);
                let x = qpsk(bits);
                let mut y = gain * x;
                if sigma > 0.0 {
                    let nr: f64 = StandardNormal.sample(rng);
                    let ni: f64 = StandardNormal.sample(rng);
                    y += Complex::new(nr, ni) * sigma;
                }
                let eq = y * gain.conj();
                let detected = u8::from(eq.re < 0.0) | (u8::from(eq.im < 0.0) << 1);
                res.symbols += 1;
                if detected != bits {
                    symbol_errors += 1;
                    block_err = true;
                }
            }
        }
        block_errors += usize::from(block_err);
    }
    res.bler = block_errors as f64 / n_blocks as f64;
    res.symbol_error_rate = if res.symbols > 0 {
        symbol_errors as f64 / res.symbols as f64
    } else {
        0.0
    };
    Ok(res)
}

/// Settings for BLER columns in a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlerSettings {
    pub dl_snr_db: f64,
    pub symbols_per_block: usize,
    pub n_blocks: usize,
    pub n_subcarriers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub model_id: String,
    pub mode: String,
    pub snr_db: f64,
    pub k: usize,
    /// `None` for unquantized latents.
    pub bits: Option<u32>,
    pub cnr_db: f64,
    /// 0 for stage-1-only rows.
    pub n_steps: usize,
    pub nmse_db: f64,
    pub bler: Option<f64>,
    pub domain: Domain,
    pub n_samples: usize,
}

pub const METRICS_HEADER: &str =
    "model_id,mode,snr_db,k,bits,cnr_db,n_steps,nmse_db,bler,domain,n_samples";

impl MetricRow {
    fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.6},{},{},{}",
            self.model_id,
            self.mode,
            self.snr_db,
            self.k,
            self.bits.map(|b| b.to_string()).unwrap_or_default(),
            self.cnr_db,
            self.n_steps,
            self.nmse_db,
            self.bler.map(|b| format!("{b:.6e}")).unwrap_or_default(),
            self.domain.tag(),
            self.n_samples
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricRow>,
}

/// Figure-style views of a table: the swept column and the series key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    NmseVsSnr,
    NmseVsK,
    NmseVsBits,
    BlerVsSnr,
}

impl PlotKind {
    pub const ALL: [PlotKind; 4] = [
        PlotKind::NmseVsSnr,
        PlotKind::NmseVsK,
        PlotKind::NmseVsBits,
        PlotKind::BlerVsSnr,
    ];

    pub fn file_stem(self) -> &'static str {
        match self {
            PlotKind::NmseVsSnr => "nmse-vs-snr",
            PlotKind::NmseVsK => "nmse-vs-k",
            PlotKind::NmseVsBits => "nmse-vs-bits",
            PlotKind::BlerVsSnr => "bler-vs-snr",
        }
    }
}

impl MetricsTable {
    pub fn push(&mut self, row: MetricRow) {
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv());
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// `series,x,y` points for one figure. Series fix every column except
    /// the swept one; series with a single point are omitted.
    pub fn plot_data(&self, kind: PlotKind) -> String {
        let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
        for r in &self.rows {
            let bits = r.bits.map(|b| b.to_string()).unwrap_or_else(|| "none".into());
            let (key, x, y) = match kind {
                PlotKind::NmseVsSnr => (
                    format!("{}/{}/k{}/b{}/cnr{}/s{}", r.model_id, r.mode, r.k, bits, r.cnr_db, r.n_steps),
                    r.snr_db,
                    Some(r.nmse_db),
                ),
                PlotKind::NmseVsK => (
                    format!("{}/{}/snr{}/b{}/cnr{}/s{}", r.model_id, r.mode, r.snr_db, bits, r.cnr_db, r.n_steps),
                    r.k as f64,
                    Some(r.nmse_db),
                ),
                PlotKind::NmseVsBits => match r.bits {
                    Some(b) => (
                        format!("{}/{}/snr{}/k{}/cnr{}/s{}", r.model_id, r.mode, r.snr_db, r.k, r.cnr_db, r.n_steps),
                        b as f64,
                        Some(r.nmse_db),
                    ),
                    None => continue,
                },
                PlotKind::BlerVsSnr => (
                    format!("{}/{}/k{}/b{}/cnr{}/s{}", r.model_id, r.mode, r.k, bits, r.cnr_db, r.n_steps),
                    r.snr_db,
                    r.bler,
                ),
            };
            let Some(y) = y else { continue };
            match series.iter_mut().find(|(k, _)| *k == key) {
                Some((_, pts)) => pts.push((x, y)),
                None => series.push((key, vec![(x, y)])),
            }
        }
        let mut s = String::from("series,x,y\n");
        for (key, mut pts) in series.into_iter().filter(|(_, p)| p.len() > 1) {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            for (x, y) in pts {
                let _ = writeln!(s, "{key},{x},{y}");
            }
        }
        s
    }

    /// Write `metrics.csv` and the four plot-data files into `dir`.
    pub fn write_all(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.write_csv(&dir.join("metrics.csv"))?;
        for kind in PlotKind::ALL {
            fs::write(dir.join(format!("{}.csv", kind.file_stem())), self.plot_data(kind))?;
        }
        Ok(())
    }
}

/// Optional refinement stage of a [`Pipeline`].
#[derive(Debug, Clone, Copy)]
pub struct Refiner<'a, T> {
    pub denoiser: &'a Denoiser<T>,
    pub schedule: &'a DiffusionSchedule,
    pub mode: DiffusionMode,
    pub init: SamplerInit,
}

/// Trained models plus everything needed to turn test samples into
/// reconstructions.
#[derive(Debug, Clone)]
pub struct Pipeline<'a, T> {
    pub model_id: String,
    pub ae: &'a Autoencoder<T>,
    pub refiner: Option<Refiner<'a, T>>,
    pub channel: ChannelConfig,
    pub quant: QuantSettings,
    pub stats: NormStats,
    /// Mean physical entry power of the training split, for CNR injection.
    pub mean_power: f64,
}

/// One evaluation point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub snr_db: f64,
    pub k: usize,
    pub bits: Option<u32>,
    pub cnr_db: f64,
    /// 0 stops after the autoencoder.
    pub n_steps: usize,
}

impl<T: Scalar> Pipeline<'_, T> {
    /// Normalized reconstructions of the normalized batch `x` at `cell`. The
    /// encoder sees `x` corrupted at `cell.cnr_db`.
    pub fn run<R: Rng + ?Sized>(&self, x: &Tensor<T>, cell: &Cell, rng: &mut R) -> Result<Tensor<T>> {
        let che = CheSetup {
            cnr: CnrConfig {
                cnr_db: cell.cnr_db,
            },
            stats: self.stats,
            mean_power: self.mean_power,
        };
        let observed = che.corrupt(x, rng);
        let quant = match cell.bits {
            Some(b) => Some(self.ae.quant_config(&self.quant, b)?),
            None => None,
        };
        let link = LinkOptions {
            k_active: cell.k,
            channel: ChannelConfig {
                snr_db: cell.snr_db,
                ..self.channel
            },
            quant,
        };
        let h_hat = self.ae.reconstruct(&observed, &link, rng)?;
        if cell.n_steps == 0 {
            return Ok(h_hat);
        }
        let r = self.refiner.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "model {} has no diffusion stage for n_steps = {}",
                self.model_id, cell.n_steps
            ))
        })?;
        r.denoiser.refine(&h_hat, r.schedule, cell.n_steps, r.mode, r.init, rng)
    }

    fn mode_tag(&self, cell: &Cell) -> &'static str {
        match (&self.refiner, cell.n_steps) {
            (Some(r), n) if n > 0 => r.mode.tag(),
            _ => "ae",
        }
    }
}

/// Cartesian product of the sweep axes.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub snr_db: Vec<f64>,
    pub k: Vec<usize>,
    pub bits: Vec<Option<u32>>,
    pub cnr_db: Vec<f64>,
    pub n_steps: Vec<usize>,
}

impl SweepGrid {
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &snr_db in &self.snr_db {
            for &k in &self.k {
                for &bits in &self.bits {
                    for &cnr_db in &self.cnr_db {
                        for &n_steps in &self.n_steps {
                            out.push(Cell {
                                snr_db,
                                k,
                                bits,
                                cnr_db,
                                n_steps,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

fn to_matrices<T: Scalar>(x: &Tensor<T>, n_subcarriers: usize) -> Result<Vec<CMatrix<T>>> {
    let (rows, cols) = (x.shape()[2], x.shape()[3]);
    (0..x.batch())
        .map(|b| ad_to_sf(&CMatrix::from_planes(x.item(b), rows, cols)?, n_subcarriers))
        .collect()
}

/// Rescale SF channels so the true channels have unit mean entry power
/// `E|h_ij|^2 = 1`; the downlink SNR then reads as the per-antenna SNR
/// before the MRT array gain.
fn unit_entry_power(true_sf: &mut [CMatrix<f64>], rec_sf: &mut [CMatrix<f64>]) {
    let entries: usize = true_sf.iter().map(|m| m.rows * m.cols).sum();
    let total: f64 = true_sf.iter().map(|m| m.frob_sq()).sum();
    if !(total > 0.0) {
        return;
    }
    let c = (entries as f64 / total).sqrt();
    for m in true_sf.iter_mut().chain(rec_sf.iter_mut()) {
        for z in &mut m.data {
            *z *= c;
        }
    }
}

/// Evaluate `pipeline` on every cell of `grid`. Each cell draws from its own
/// RNG stream derived from `(seed, cell index)`, so tables are reproducible
/// and independent of evaluation order.
pub fn sweep<T: Scalar>(
    pipeline: &Pipeline<'_, T>,
    test: &CsiDataset<T>,
    grid: &SweepGrid,
    bler: Option<&BlerSettings>,
    seed: u64,
) -> Result<MetricsTable> {
    let x = test.tensor();
    let phys = pipeline.stats.invert(x);
    let mut table = MetricsTable::default();
    for (i, cell) in grid.cells().iter().enumerate() {
        let mut rng: ChaCha8Rng = iteration_rng(seed, i);
        let rec = pipeline.run(x, cell, &mut rng)?;
        let rec_phys = pipeline.stats.invert(&rec);
        let nmse = nmse_db(&phys, &rec_phys)?;
        let bler = match bler {
            Some(b) => {
                let to_sf = |t: &Tensor<T>| -> Result<Vec<CMatrix<f64>>> {
                    match test.domain() {
                        Domain::Ad => to_matrices(&t.cast::<f64>(), b.n_subcarriers),
                        Domain::Sf => {
                            let t = t.cast::<f64>();
                            let (r, c) = (t.shape()[2], t.shape()[3]);
                            (0..t.batch())
                                .map(|j| CMatrix::from_planes(t.item(j), r, c))
                                .collect()
                        }
                    }
                };
                let (mut ht, mut hr) = (to_sf(&phys)?, to_sf(&rec_phys)?);
                unit_entry_power(&mut ht, &mut hr);
                let res = bler_uncoded(&ht, &hr, b.dl_snr_db, b.symbols_per_block, b.n_blocks, &mut rng)?;
                Some(res.bler)
            }
            None => None,
        };
        table.push(MetricRow {
            model_id: pipeline.model_id.clone(),
            mode: pipeline.mode_tag(cell).to_string(),
            snr_db: cell.snr_db,
            k: cell.k,
            bits: cell.bits,
            cnr_db: cell.cnr_db,
            n_steps: cell.n_steps,
            nmse_db: nmse,
            bler,
            domain: test.domain(),
            n_samples: test.len(),
        });
    }
    Ok(table)
}

/// Stages timed by [`bench_throughput`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Encoder,
    Decoder,
    /// Sampler with this many steps.
    Diffusion(usize),
}

impl Stage {
    pub fn label(self) -> String {
        match self {
            Stage::Encoder => "encoder".into(),
            Stage::Decoder => "decoder".into(),
            Stage::Diffusion(n) => format!("diffusion-{n}"),
        }
    }
}

/// Median samples per second of `f` over `n_repeats` timed calls on a batch
/// of `batch_size`, after one untimed warm-up call.
pub fn median_throughput(
    batch_size: usize,
    n_repeats: usize,
    mut f: impl FnMut() -> Result<()>,
) -> Result<f64> {
    if batch_size == 0 || n_repeats == 0 {
        return Err(Error::InvalidArgument("throughput needs batch_size, n_repeats >= 1".into()));
    }
    f()?;
    let mut rates = Vec::with_capacity(n_repeats);
    for _ in 0..n_repeats {
        let t0 = Instant::now();
        f()?;
        let dt = t0.elapsed().as_secs_f64().max(1e-9);
        rates.push(batch_size as f64 / dt);
    }
    rates.sort_by(f64::total_cmp);
    let m = rates.len();
    Ok(if m % 2 == 1 {
        rates[m / 2]
    } else {
        0.5 * (rates[m / 2 - 1] + rates[m / 2])
    })
}

/// Throughput of one stage of `pipeline` on the first `batch_size` samples
/// of `x` (cycled if `x` is smaller).
pub fn bench_throughput<T: Scalar>(
    pipeline: &Pipeline<'_, T>,
    x: &Tensor<T>,
    stage: Stage,
    batch_size: usize,
    n_repeats: usize,
    seed: u64,
) -> Result<f64> {
    let idx: Vec<usize> = (0..batch_size).map(|i| i % x.batch()).collect();
    let xb = x.gather(&idx);
    let snr = vec![pipeline.channel.snr_db; batch_size];
    let k = pipeline.ae.arch.latent_k_max;
    let mut rng: ChaCha8Rng = iteration_rng(seed, 0);
    match stage {
        Stage::Encoder => median_throughput(batch_size, n_repeats, || {
            pipeline.ae.encode_batch(&xb, &snr, k).map(|_| ())
        }),
        Stage::Decoder => {
            let y = pipeline.ae.encode_batch(&xb, &snr, k)?;
            median_throughput(batch_size, n_repeats, || {
                pipeline.ae.decode_batch(&y, &snr).map(|_| ())
            })
        }
        Stage::Diffusion(n_steps) => {
            let r = pipeline.refiner.as_ref().ok_or_else(|| {
                Error::InvalidArgument("diffusion throughput needs a denoiser".into())
            })?;
            let h_hat = pipeline.ae.reconstruct(
                &xb,
                &LinkOptions {
                    k_active: k,
                    channel: pipeline.channel,
                    quant: None,
                },
                &mut rng,
            )?;
            median_throughput(batch_size, n_repeats, || {
                r.denoiser
                    .refine(&h_hat, r.schedule, n_steps, r.mode, r.init, &mut rng)
                    .map(|_| ())
            })
        }
    }
}
