//! CSI samples and datasets in the spatial-frequency (SF) and angular-delay
//! (AD) domains: transforms, synthetic generation, normalization and the
//! on-disk container.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, LoadError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    /// Subcarriers x antennas.
    Sf,
    /// Delay taps x angle bins.
    Ad,
}

impl Domain {
    pub fn flag(self) -> u32 {
        match self {
            Domain::Sf => 0,
            Domain::Ad => 1,
        }
    }

    pub fn from_flag(flag: u32) -> Option<Self> {
        match flag {
            0 => Some(Domain::Sf),
            1 => Some(Domain::Ad),
            _ => None,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Domain::Sf => "SF",
            Domain::Ad => "AD",
        }
    }
}

/// Row-major complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex<T>>,
}

impl<T: Scalar> CMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Complex::new(T::zero(), T::zero()); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex<T>) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> Complex<T> {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[Complex<T>] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn frob_sq(&self) -> T {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Plane-stacked real layout `[2, rows, cols]`, real plane first.
    pub fn to_planes(&self) -> Tensor<T> {
        let n = self.data.len();
        let mut v = vec![T::zero(); 2 * n];
        for (i, z) in self.data.iter().enumerate() {
            v[i] = z.re;
            v[n + i] = z.im;
        }
        Tensor::from_vec(&[2, self.rows, self.cols], v).expect("plane layout")
    }

    pub fn from_planes(planes: &[T], rows: usize, cols: usize) -> Result<Self> {
        let n = rows * cols;
        if planes.len() != 2 * n {
            return Err(Error::Shape(format!(
                "expected {} plane values for {rows}x{cols}, got {}",
                2 * n,
                planes.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            data: (0..n).map(|i| Complex::new(planes[i], planes[n + i])).collect(),
        })
    }
}

/// Unitary 2-D DFT; `inverse` selects the `e^{+j}` kernel.
fn dft2_unitary<T: Scalar>(m: &mut CMatrix<T>, inverse: bool) {
    let mut planner = FftPlanner::<T>::new();
    let (rows, cols) = (m.rows, m.cols);
    let row_fft = if inverse {
        planner.plan_fft_inverse(cols)
    } else {
        planner.plan_fft_forward(cols)
    };
    for r in 0..rows {
        row_fft.process(&mut m.data[r * cols..(r + 1) * cols]);
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(rows)
    } else {
        planner.plan_fft_forward(rows)
    };
    let mut col = vec![Complex::new(T::zero(), T::zero()); rows];
    for c in 0..cols {
        for r in 0..rows {
            col[r] = m.data[r * cols + c];
        }
        col_fft.process(&mut col);
        for r in 0..rows {
            m.data[r * cols + c] = col[r];
        }
    }
    let s = T::one() / T::lit((rows * cols) as f64).sqrt();
    m.data.iter_mut().for_each(|z| *z = *z * s);
}

/// Spatial-frequency channel (`N_c x N_t`) to the first `n_delay` rows of its
/// unitary 2-D inverse DFT.
pub fn sf_to_ad<T: Scalar>(h_sf: &CMatrix<T>, n_delay: usize) -> Result<CMatrix<T>> {
    if n_delay == 0 || n_delay > h_sf.rows {
        return Err(Error::InvalidArgument(format!(
            "n_delay {n_delay} must be in 1..={}",
            h_sf.rows
        )));
    }
    if h_sf.data.len() != h_sf.rows * h_sf.cols {
        return Err(Error::InvalidArgument("matrix storage does not match dims".into()));
    }
    let mut full = h_sf.clone();
    dft2_unitary(&mut full, true);
    full.data.truncate(n_delay * full.cols);
    full.rows = n_delay;
    Ok(full)
}

/// Inverse of [`sf_to_ad`]: zero-pad to `n_subcarriers` rows, then forward DFT.
pub fn ad_to_sf<T: Scalar>(h_ad: &CMatrix<T>, n_subcarriers: usize) -> Result<CMatrix<T>> {
    if h_ad.rows == 0 || h_ad.rows > n_subcarriers {
        return Err(Error::InvalidArgument(format!(
            "{} delay rows cannot be padded to {n_subcarriers} subcarriers",
            h_ad.rows
        )));
    }
    if h_ad.data.len() != h_ad.rows * h_ad.cols {
        return Err(Error::InvalidArgument("matrix storage does not match dims".into()));
    }
    let mut full = CMatrix::zeros(n_subcarriers, h_ad.cols);
    full.data[..h_ad.data.len()].copy_from_slice(&h_ad.data);
    dft2_unitary(&mut full, false);
    Ok(full)
}

/// One channel realization, `[2, R, C]` real/imag planes.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiSample<T> {
    pub values: Tensor<T>,
    pub domain: Domain,
}

impl<T: Scalar> CsiSample<T> {
    pub fn from_matrix(m: &CMatrix<T>, domain: Domain) -> Self {
        Self {
            values: m.to_planes(),
            domain,
        }
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn cols(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn to_matrix(&self) -> CMatrix<T> {
        CMatrix::from_planes(self.values.data(), self.rows(), self.cols()).expect("planes")
    }
}

/// Immutable collection of equally shaped samples stored as `[N, 2, R, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiDataset<T> {
    data: Tensor<T>,
    domain: Domain,
}

impl<T: Scalar> CsiDataset<T> {
    pub fn from_tensor(data: Tensor<T>, domain: Domain) -> Result<Self> {
        let s = data.shape();
        if s.len() != 4 || s[1] != 2 {
            return Err(Error::Shape(format!("dataset must be [N, 2, R, C], got {s:?}")));
        }
        Ok(Self { data, domain })
    }

    pub fn from_samples(samples: &[CsiSample<T>]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty dataset".into()))?;
        let refs: Vec<&Tensor<T>> = samples.iter().map(|s| &s.values).collect();
        Self::from_tensor(Tensor::stack(&refs)?, first.domain)
    }

    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn cols(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn sample(&self, i: usize) -> CsiSample<T> {
        CsiSample {
            values: Tensor::from_vec(&self.data.shape()[1..], self.data.item(i).to_vec())
                .expect("item shape"),
            domain: self.domain,
        }
    }

    /// `[B, 2, R, C]` batch of the selected samples.
    pub fn batch(&self, idx: &[usize]) -> Tensor<T> {
        self.data.gather(idx)
    }

    /// First `n` samples and the rest.
    pub fn split(&self, n: usize) -> Result<(Self, Self)> {
        if n == 0 || n >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "split point {n} must be inside 1..{}",
                self.len()
            )));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        Ok((
            Self {
                data: self.data.gather(&head),
                domain: self.domain,
            },
            Self {
                data: self.data.gather(&tail),
                domain: self.domain,
            },
        ))
    }

    pub fn map_values(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            data: self.data.map(f),
            domain: self.domain,
        }
    }

    /// Mean per-entry complex power `E|h|^2`.
    pub fn mean_entry_power(&self) -> T {
        let entries = T::lit((self.len() * self.rows() * self.cols()) as f64);
        self.data.sq_norm() / entries
    }

    /// Convert every AD sample back to the SF domain.
    pub fn to_sf(&self, n_subcarriers: usize) -> Result<Self> {
        if self.domain == Domain::Sf {
            return Ok(self.clone());
        }
        let mut out = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let m = self.sample(i).to_matrix();
            out.push(CsiSample::from_matrix(&ad_to_sf(&m, n_subcarriers)?, Domain::Sf));
        }
        Self::from_samples(&out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScheme {
    MinmaxGlobal,
    None,
}

/// Affine normalization statistics, computed on the training split only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min_val: f64,
    pub max_val: f64,
    pub scheme: NormScheme,
}

impl NormStats {
    pub fn identity() -> Self {
        Self {
            min_val: 0.0,
            max_val: 1.0,
            scheme: NormScheme::None,
        }
    }

    fn affine(&self) -> (f64, f64) {
        match self.scheme {
            NormScheme::MinmaxGlobal => (self.min_val, self.max_val - self.min_val),
            NormScheme::None => (0.0, 1.0),
        }
    }

    pub fn apply<T: Scalar>(&self, t: &Tensor<T>) -> Tensor<T> {
        let (lo, span) = self.affine();
        let (lo, inv) = (T::lit(lo), T::lit(1.0 / span));
        t.map(|v| (v - lo) * inv)
    }

    pub fn invert<T: Scalar>(&self, t: &Tensor<T>) -> Tensor<T> {
        let (lo, span) = self.affine();
        let (lo, span) = (T::lit(lo), T::lit(span));
        t.map(|v| v * span + lo)
    }

    /// Normalized value that corresponds to physical zero.
    pub fn zero_level(&self) -> f64 {
        let (lo, span) = self.affine();
        -lo / span
    }
}

/// Fit statistics on `dataset` and return it normalized.
pub fn normalize<T: Scalar>(
    dataset: &CsiDataset<T>,
    scheme: NormScheme,
) -> Result<(CsiDataset<T>, NormStats)> {
    let stats = match scheme {
        NormScheme::None => NormStats::identity(),
        NormScheme::MinmaxGlobal => {
            let d = dataset.tensor().data();
            let lo = d.iter().fold(f64::INFINITY, |a, &v| a.min(v.as_f64()));
            let hi = d.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v.as_f64()));
            if !(hi > lo) {
                return Err(Error::Degenerate(format!(
                    "min-max normalization needs max > min, got [{lo}, {hi}]"
                )));
            }
            NormStats {
                min_val: lo,
                max_val: hi,
                scheme,
            }
        }
    };
    Ok((normalize_with(dataset, &stats), stats))
}

/// Normalize with previously fitted statistics; values outside `[0, 1]` are
/// kept as is.
pub fn normalize_with<T: Scalar>(dataset: &CsiDataset<T>, stats: &NormStats) -> CsiDataset<T> {
    CsiDataset {
        data: stats.apply(dataset.tensor()),
        domain: dataset.domain,
    }
}

pub fn denormalize<T: Scalar>(dataset: &CsiDataset<T>, stats: &NormStats) -> CsiDataset<T> {
    CsiDataset {
        data: stats.invert(dataset.tensor()),
        domain: dataset.domain,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Simple,
    Complex,
    Custom,
}

/// Clustered multipath generator settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub preset: Preset,
    pub n_clusters: usize,
    pub paths_per_cluster: usize,
    /// Per-path angle deviation around the cluster centre, radians.
    pub angular_spread: f64,
    /// Per-path delay deviation around the cluster delay, taps.
    pub delay_spread: f64,
    pub n_delay: usize,
    pub n_tx: usize,
    pub n_subcarriers: usize,
}

impl SynthConfig {
    /// One narrow cluster: sparse AD support.
    pub fn simple(n_delay: usize, n_tx: usize, n_subcarriers: usize) -> Self {
        Self {
            preset: Preset::Simple,
            n_clusters: 1,
            paths_per_cluster: 4,
            angular_spread: 0.01,
            delay_spread: 0.2,
            n_delay,
            n_tx,
            n_subcarriers,
        }
    }

    /// Many wide clusters: diffuse AD support.
    pub fn complex(n_delay: usize, n_tx: usize, n_subcarriers: usize) -> Self {
        Self {
            preset: Preset::Complex,
            n_clusters: 10,
            paths_per_cluster: 12,
            angular_spread: 0.25,
            delay_spread: 2.0,
            n_delay,
            n_tx,
            n_subcarriers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synth config: {m}")));
        if self.n_clusters < 1 {
            return bad("n_clusters must be >= 1");
        }
        if self.paths_per_cluster < 1 {
            return bad("paths_per_cluster must be >= 1");
        }
        if !(self.angular_spread > 0.0 && self.angular_spread < std::f64::consts::PI) {
            return bad("angular_spread must lie in (0, pi)");
        }
        if !(self.delay_spread >= 0.0 && self.delay_spread.is_finite()) {
            return bad("delay_spread must be finite and >= 0");
        }
        if self.n_delay < 4 || self.n_tx < 1 {
            return bad("n_delay must be >= 4 and n_tx >= 1");
        }
        if self.n_delay > self.n_subcarriers {
            return bad("n_delay must not exceed n_subcarriers");
        }
        Ok(())
    }
}

// Raised-cosine pulse, roll-off 0.5, unit symbol period.
fn raised_cosine(t: f64) -> f64 {
    const BETA: f64 = 0.5;
    let sinc = if t.abs() < 1e-12 {
        1.0
    } else {
        (std::f64::consts::PI * t).sin() / (std::f64::consts::PI * t)
    };
    let den = 1.0 - (2.0 * BETA * t).powi(2);
    if den.abs() < 1e-9 {
        std::f64::consts::FRAC_PI_4 * sinc
    } else {
        sinc * (std::f64::consts::PI * BETA * t).cos() / den
    }
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// SF-domain channel for sample `index`, unit Frobenius norm.
pub fn synthesize_sf<T: Scalar>(cfg: &SynthConfig, seed: u64, index: u64) -> CMatrix<T> {
    use std::f64::consts::PI;
    let mut rng = sample_rng(seed, index);
    let (nc, nt) = (cfg.n_subcarriers, cfg.n_tx);
    // delay-antenna response G[d, a] over all N_c taps
    let mut g = vec![Complex::new(0.0f64, 0.0); nc * nt];
    let max_tau = cfg.n_delay as f64 - 3.0;
    let half_span = 0.45 * PI;
    for _ in 0..cfg.n_clusters {
        let theta_c = rng.gen_range(-half_span..half_span);
        let tau_c = rng.gen_range(0.0..(0.6 * cfg.n_delay as f64));
        let power = (-tau_c / (0.25 * cfg.n_delay as f64)).exp() * rng.gen_range(0.5..1.0);
        let amp = (power / cfg.paths_per_cluster as f64).sqrt();
        for _ in 0..cfg.paths_per_cluster {
            let z: f64 = StandardNormal.sample(&mut rng);
            let theta = (theta_c + cfg.angular_spread * z).clamp(-half_span, half_span);
            let zd: f64 = StandardNormal.sample(&mut rng);
            let tau = (tau_c + cfg.delay_spread * zd.abs()).clamp(0.0, max_tau);
            let gr: f64 = StandardNormal.sample(&mut rng);
            let gi: f64 = StandardNormal.sample(&mut rng);
            let gain = Complex::new(gr, gi) * (amp / 2f64.sqrt());
            let s = theta.sin();
            for d in 0..nc {
                // circular distance so pulse tails wrap like a cyclic prefix channel
                let mut dt = d as f64 - tau;
                if dt > nc as f64 / 2.0 {
                    dt -= nc as f64;
                }
                let p = raised_cosine(dt);
                if p == 0.0 {
                    continue;
                }
                for a in 0..nt {
                    let steer = Complex::from_polar(1.0, -PI * a as f64 * s);
                    g[d * nt + a] += gain * steer * p;
                }
            }
        }
    }
    // unitary DFT along the delay axis gives the subcarrier response
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(nc);
    let mut col = vec![Complex::new(0.0, 0.0); nc];
    let mut h = vec![Complex::new(0.0, 0.0); nc * nt];
    for a in 0..nt {
        for d in 0..nc {
            col[d] = g[d * nt + a];
        }
        fft.process(&mut col);
        for n in 0..nc {
            h[n * nt + a] = col[n];
        }
    }
    let norm = h.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt().max(1e-300);
    CMatrix {
        rows: nc,
        cols: nt,
        data: h
            .into_iter()
            .map(|z| Complex::new(T::lit(z.re / norm), T::lit(z.im / norm)))
            .collect(),
    }
}

/// AD-domain dataset of `n_samples` synthetic channels. Sample `i` depends
/// only on `(cfg, seed, i)`.
pub fn generate_synthetic<T: Scalar>(
    cfg: &SynthConfig,
    n_samples: usize,
    seed: u64,
) -> Result<CsiDataset<T>> {
    cfg.validate()?;
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
    }
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let sf = synthesize_sf::<T>(cfg, seed, i as u64);
        samples.push(CsiSample::from_matrix(&sf_to_ad(&sf, cfg.n_delay)?, Domain::Ad));
    }
    CsiDataset::from_samples(&samples)
}

const MAGIC: &[u8; 12] = b"CSIJSCC-DATA";
pub const CONTAINER_VERSION: u32 = 1;

/// Write the binary container: 12-byte magic, `u32` version, then `u32`
/// `(n_samples, R, C, domain)` and `f32` samples in plane-major order, all
/// little-endian.
pub fn save_dataset<T: Scalar>(dataset: &CsiDataset<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
    for v in [
        dataset.len() as u32,
        dataset.rows() as u32,
        dataset.cols() as u32,
        dataset.domain.flag(),
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for &v in dataset.tensor().data() {
        w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read a container written by [`save_dataset`].
pub fn load_dataset<T: Scalar>(path: &Path) -> Result<CsiDataset<T>> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Load(LoadError::Missing(path.to_path_buf())),
        _ => Error::Io(e),
    })?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes)?;
    let malformed = |m: String| Error::Load(LoadError::Malformed(m));
    if bytes.len() < 32 {
        return Err(malformed(format!("header truncated ({} bytes)", bytes.len())));
    }
    if &bytes[..12] != MAGIC {
        return Err(malformed("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(12);
    if version != CONTAINER_VERSION {
        return Err(malformed(format!("unsupported version {version}")));
    }
    let (n, r, c, flag) = (word(16) as usize, word(20) as usize, word(24) as usize, word(28));
    let domain = Domain::from_flag(flag).ok_or_else(|| malformed(format!("domain flag {flag}")))?;
    let count = n
        .checked_mul(2 * r * c)
        .ok_or_else(|| malformed("dimension overflow".into()))?;
    let payload = &bytes[32..];
    if payload.len() != count * 4 {
        return Err(malformed(format!(
            "expected {} payload bytes for {n}x2x{r}x{c}, found {}",
            count * 4,
            payload.len()
        )));
    }
    let per = 2 * r * c;
    let mut data = Vec::with_capacity(count);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(Error::Load(LoadError::NonFinite { sample: i / per.max(1) }));
        }
        data.push(T::lit(v as f64));
    }
    CsiDataset::from_tensor(Tensor::from_vec(&[n, 2, r, c], data)?, domain)
}

/// Sidecar `key,value` CSV recording normalization and generator settings.
pub fn write_metadata(
    path: &Path,
    stats: &NormStats,
    synth: Option<&SynthConfig>,
    extra: &[(&str, String)],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "key,value")?;
    let scheme = match stats.scheme {
        NormScheme::MinmaxGlobal => "minmax_global",
        NormScheme::None => "none",
    };
    writeln!(w, "norm.scheme,{scheme}")?;
    writeln!(w, "norm.min_val,{:e}", stats.min_val)?;
    writeln!(w, "norm.max_val,{:e}", stats.max_val)?;
    if let Some(s) = synth {
        let preset = match s.preset {
            Preset::Simple => "simple",
            Preset::Complex => "complex",
            Preset::Custom => "custom",
        };
        writeln!(w, "synth.preset,{preset}")?;
        writeln!(w, "synth.n_clusters,{}", s.n_clusters)?;
        writeln!(w, "synth.paths_per_cluster,{}", s.paths_per_cluster)?;
        writeln!(w, "synth.angular_spread,{}", s.angular_spread)?;
        writeln!(w, "synth.delay_spread,{}", s.delay_spread)?;
        writeln!(w, "synth.n_delay,{}", s.n_delay)?;
        writeln!(w, "synth.n_tx,{}", s.n_tx)?;
        writeln!(w, "synth.n_subcarriers,{}", s.n_subcarriers)?;
    }
    for (k, v) in extra {
        writeln!(w, "{k},{v}")?;
    }
    w.flush()?;
    Ok(())
}

/// Parse the sidecar back into `(key, value)` pairs.
pub fn read_metadata(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .skip(1)
        .filter_map(|l| l.split_once(','))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

/// Recover [`NormStats`] from sidecar pairs.
pub fn norm_stats_from_metadata(pairs: &[(String, String)]) -> Result<NormStats> {
    let get = |k: &str| {
        pairs
            .iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Load(LoadError::Malformed(format!("metadata lacks {k}"))))
    };
    let num = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|_| Error::Load(LoadError::Malformed(format!("metadata {k} not a number"))))
    };
    let scheme = match get("norm.scheme")? {
        "minmax_global" => NormScheme::MinmaxGlobal,
        "none" => NormScheme::None,
        other => {
            return Err(Error::Load(LoadError::Malformed(format!(
                "unknown norm scheme {other}"
            ))))
        }
    };
    Ok(NormStats {
        min_val: num("norm.min_val")?,
        max_val: num("norm.max_val")?,
        scheme,
    })
}

/// Fraction of total energy held by the largest `frac` of entries,
/// averaged over samples.
pub fn top_energy_fraction<T: Scalar>(dataset: &CsiDataset<T>, frac: f64) -> f64 {
    let n_entries = dataset.rows() * dataset.cols();
    let keep = ((n_entries as f64 * frac).ceil() as usize).max(1);
    let mut acc = 0.0;
    for i in 0..dataset.len() {
        let m = dataset.sample(i).to_matrix();
        let mut p: Vec<f64> = m.data.iter().map(|z| z.norm_sqr().as_f64()).collect();
        let total: f64 = p.iter().sum();
        p.sort_by(|a, b| b.total_cmp(a));
        acc += p[..keep].iter().sum::<f64>() / total.max(1e-300);
    }
    acc / dataset.len() as f64
}
