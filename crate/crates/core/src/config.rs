//! Run configuration: one TOML file per run, with dotted `key=value`
//! overrides applied on top.
//!
//! Precedence, lowest first: built-in defaults, the config file, overrides
//! in the order given.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoencoder::{AeArch, DecoderConfig, EncoderConfig, MrlConfig};
use crate::channel::{ChannelConfig, CnrConfig};
use crate::csi_data::{NormScheme, Preset, SynthConfig};
use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::evaluation::SweepGrid;
use crate::nn::optim::OptimizerConfig;
use crate::quantizer::{QuantMode, QuantSettings};
use crate::scalar::DType;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub tag: String,
    pub dtype: DType,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            tag: "default".into(),
            dtype: DType::F32,
        }
    }
}

/// Dataset source. Synthetic settings start from `preset` and any explicit
/// field overrides it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub preset: Preset,
    pub n_clusters: Option<usize>,
    pub paths_per_cluster: Option<usize>,
    pub angular_spread: Option<f64>,
    pub delay_spread: Option<f64>,
    pub n_delay: usize,
    pub n_tx: usize,
    pub n_subcarriers: usize,
    pub n_samples: usize,
    /// Leading samples used for training and normalization statistics.
    pub n_train: usize,
    pub norm: NormScheme,
    /// Existing dataset container; when unset, `generate-data` writes one
    /// into the run directory.
    pub path: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            preset: Preset::Complex,
            n_clusters: None,
            paths_per_cluster: None,
            angular_spread: None,
            delay_spread: None,
            n_delay: 32,
            n_tx: 32,
            n_subcarriers: 256,
            n_samples: 5000,
            n_train: 4500,
            norm: NormScheme::MinmaxGlobal,
            path: None,
        }
    }
}

impl DataSection {
    pub fn synth(&self) -> SynthConfig {
        let (r, c, nc) = (self.n_delay, self.n_tx, self.n_subcarriers);
        let mut s = match self.preset {
            Preset::Simple => SynthConfig::simple(r, c, nc),
            Preset::Complex | Preset::Custom => SynthConfig::complex(r, c, nc),
        };
        s.preset = self.preset;
        if let Some(v) = self.n_clusters {
            s.n_clusters = v;
        }
        if let Some(v) = self.paths_per_cluster {
            s.paths_per_cluster = v;
        }
        if let Some(v) = self.angular_spread {
            s.angular_spread = v;
        }
        if let Some(v) = self.delay_spread {
            s.delay_spread = v;
        }
        s
    }
}

/// Estimation error injected at the UE during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheSection {
    /// `inf` trains on perfect CSI.
    pub train_cnr_db: f64,
}

impl Default for CheSection {
    fn default() -> Self {
        Self {
            train_cnr_db: f64::INFINITY,
        }
    }
}

impl CheSection {
    pub fn cnr(&self) -> CnrConfig {
        CnrConfig {
            cnr_db: self.train_cnr_db,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeSection {
    pub latent_k_max: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub mrl: MrlConfig,
    pub optimizer: OptimizerConfig,
}

impl Default for AeSection {
    fn default() -> Self {
        let arch = AeArch::default();
        Self {
            latent_k_max: arch.latent_k_max,
            encoder: arch.encoder,
            decoder: arch.decoder,
            mrl: arch.mrl,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl AeSection {
    pub fn arch(&self) -> AeArch {
        AeArch {
            latent_k_max: self.latent_k_max,
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            mrl: self.mrl.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantSection {
    pub enabled: bool,
    pub mu: f64,
    pub bits: u32,
    pub mode: QuantMode,
    pub scale_decay: f64,
    /// Train over a noiseless link while quantization is active.
    pub noiseless_link: bool,
}

impl Default for QuantSection {
    fn default() -> Self {
        let q = QuantSettings::default();
        Self {
            enabled: q.enabled,
            mu: q.mu,
            bits: q.bits,
            mode: q.mode,
            scale_decay: q.scale_decay,
            noiseless_link: true,
        }
    }
}

impl QuantSection {
    pub fn settings(&self) -> QuantSettings {
        QuantSettings {
            enabled: self.enabled,
            mu: self.mu,
            bits: self.bits,
            mode: self.mode,
            scale_decay: self.scale_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub snr_db: Vec<f64>,
    /// Empty means `[ae.latent_k_max]`.
    pub k: Vec<usize>,
    /// Quantizer bit widths; each adds a quantized cell.
    pub bits: Vec<u32>,
    /// Also evaluate unquantized latents.
    pub unquantized: bool,
    pub cnr_db: Vec<f64>,
    /// 0 stops after the autoencoder.
    pub n_steps: Vec<usize>,
    /// Test samples used, taken after the training split; 0 uses all.
    pub n_test: usize,
    pub bler: bool,
    pub dl_snr_db: f64,
    pub symbols_per_block: usize,
    pub n_blocks: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            snr_db: vec![0.0, 5.0, 10.0],
            k: Vec::new(),
            bits: Vec::new(),
            unquantized: true,
            cnr_db: vec![f64::INFINITY],
            n_steps: vec![0, 2],
            n_test: 500,
            bler: false,
            dl_snr_db: 5.0,
            symbols_per_block: 1,
            n_blocks: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub batch_size: usize,
    pub n_repeats: usize,
    /// Sampler step counts to time.
    pub steps: Vec<usize>,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            batch_size: 1000,
            n_repeats: 5,
            steps: vec![2, 20],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub channel: ChannelConfig,
    pub che: CheSection,
    pub ae: AeSection,
    pub quant: QuantSection,
    pub diff: DiffusionConfig,
    pub eval: EvalSection,
    pub bench: BenchSection,
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Parse an override value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Set `dotted.key` in `table`, creating intermediate tables.
fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("malformed key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parse TOML text and apply `key=value` overrides.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(config_err)?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| config_err(format!("override `{o}` is not key=value")))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read `path` (or start from defaults when `None`) and apply overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| {
                config_err(format!("cannot read config {}: {e}", p.display()))
            })?,
            None => String::new(),
        };
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(config_err)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.n_train == 0 || d.n_train >= d.n_samples {
            return Err(config_err("data needs 0 < n_train < n_samples"));
        }
        if d.path.is_none() {
            self.data.synth().validate().map_err(config_err)?;
        }
        self.channel.validate().map_err(config_err)?;
        self.ae.arch().validate().map_err(config_err)?;
        self.diff.validate().map_err(config_err)?;
        if self.che.train_cnr_db.is_nan() {
            return Err(config_err("che.train_cnr_db is NaN"));
        }
        let q = &self.quant;
        if q.enabled && !(q.bits >= 1 && q.bits <= 16 && q.mu > 0.0) {
            return Err(config_err("quant needs 1 <= bits <= 16 and mu > 0"));
        }
        let e = &self.eval;
        if e.snr_db.is_empty() || e.cnr_db.is_empty() || e.n_steps.is_empty() {
            return Err(config_err("eval.snr_db, eval.cnr_db and eval.n_steps must be non-empty"));
        }
        if !e.unquantized && e.bits.is_empty() {
            return Err(config_err("eval has no latent format: set eval.unquantized or eval.bits"));
        }
        if let Some(&k) = e.k.iter().find(|&&k| k == 0 || k > self.ae.latent_k_max) {
            return Err(config_err(format!("eval.k entry {k} outside 1..=ae.latent_k_max")));
        }
        if let Some(&s) = e.n_steps.iter().find(|&&s| s > self.diff.n) {
            return Err(config_err(format!("eval.n_steps entry {s} exceeds diff.N")));
        }
        if e.bler && (e.symbols_per_block == 0 || e.n_blocks == 0) {
            return Err(config_err("eval.bler needs symbols_per_block and n_blocks >= 1"));
        }
        let b = &self.bench;
        if b.batch_size == 0 || b.n_repeats == 0 {
            return Err(config_err("bench needs batch_size and n_repeats >= 1"));
        }
        if let Some(&s) = b.steps.iter().find(|&&s| s == 0 || s > self.diff.n) {
            return Err(config_err(format!("bench.steps entry {s} outside 1..=diff.N")));
        }
        Ok(())
    }

    /// `out_dir/tag`, where every artifact of this run goes.
    pub fn run_dir(&self) -> PathBuf {
        self.run.out_dir.join(&self.run.tag)
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.data
            .path
            .clone()
            .unwrap_or_else(|| self.run_dir().join("data.bin"))
    }

    /// Sidecar next to the dataset container.
    pub fn metadata_path(&self) -> PathBuf {
        self.dataset_path().with_extension("meta.csv")
    }

    pub fn ae_checkpoint_path(&self) -> PathBuf {
        self.run_dir().join("ae.ckpt")
    }

    pub fn diffusion_checkpoint_path(&self) -> PathBuf {
        self.run_dir().join("diffusion.ckpt")
    }

    pub fn eval_grid(&self) -> SweepGrid {
        let e = &self.eval;
        let k = if e.k.is_empty() {
            vec![self.ae.latent_k_max]
        } else {
            e.k.clone()
        };
        let mut bits: Vec<Option<u32>> = Vec::new();
        if e.unquantized {
            bits.push(None);
        }
        bits.extend(e.bits.iter().map(|&b| Some(b)));
        SweepGrid {
            snr_db: e.snr_db.clone(),
            k,
            bits,
            cnr_db: e.cnr_db.clone(),
            n_steps: e.n_steps.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let c = RunConfig::default();
        let text = c.to_toml().unwrap();
        let back = RunConfig::from_toml_with(&text, &[]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            RunConfig::from_toml_with("[run]\nsed = 3\n", &[]),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::from_toml_with("[nope]\n", &[]).is_err());
        assert!(RunConfig::from_toml_with("", &["ae.mrl.ratez=[1]".into()]).is_err());
    }

    #[test]
    fn overrides_beat_file_values() {
        let text = "[run]\nseed = 3\ntag = \"a\"\n[diff]\nN = 10\n[bench]\nsteps = [2, 10]\n";
        let c = RunConfig::from_toml_with(
            text,
            &["run.seed=7".into(), "run.tag=b".into(), "ae.mrl.rates=[4, 8]".into()],
        )
        .unwrap();
        assert_eq!(c.run.seed, 7);
        assert_eq!(c.run.tag, "b");
        assert_eq!(c.diff.n, 10);
        assert_eq!(c.ae.mrl.rates, vec![4, 8]);
    }

    #[test]
    fn invalid_values_fail_validation() {
        assert!(RunConfig::from_toml_with("", &["data.n_train=9000".into()]).is_err());
        assert!(RunConfig::from_toml_with("", &["eval.n_steps=[30]".into()]).is_err());
        assert!(RunConfig::from_toml_with("", &["run.seed".into()]).is_err());
    }

    #[test]
    fn grid_follows_eval_section() {
        let c = RunConfig::from_toml_with(
            "",
            &["eval.k=[8,16,32]".into(), "eval.bits=[4]".into(), "eval.snr_db=[5.0]".into()],
        )
        .unwrap();
        let g = c.eval_grid();
        assert_eq!(g.bits, vec![None, Some(4)]);
        assert_eq!(g.cells().len(), 3 * 2 * 2);
    }
}
