//! Versioned binary checkpoints.
//!
//! Layout (little endian): 12-byte magic, `u32` version, `u8` dtype, `u8`
//! kind, 32-byte SHA-256 of the header text, `u32` length + header text
//! (TOML), `u64` iteration, `u32` count + named scalars (`f64`), `u32` count +
//! named tensors (`u32` rank, `u64` dims, values in the stored dtype).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::{AeArch, AeTrainOptions, AeTrainer, Autoencoder, TrainLog};
use crate::diffusion::{
    make_schedule, DenoiserConfig, DiffLog, DiffTrainOptions, DiffTrainer, Denoiser, DiffusionMode,
    ScheduleKind,
};
use crate::error::{Error, Result};
use crate::nn::optim::Adam;
use crate::nn::{ParamSet, Standardizer};
use crate::quantizer::ScaleTracker;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 12] = b"CSIJSCC-CKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Autoencoder = 1,
    Denoiser = 2,
}

/// Format-level contents of a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCheckpoint {
    pub dtype: DType,
    pub kind: Kind,
    pub header: String,
    pub iteration: u64,
    pub scalars: Vec<(String, f64)>,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

pub fn digest(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl RawCheckpoint {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&[self.dtype as u8, self.kind as u8])?;
        w.write_all(&digest(&self.header))?;
        w.write_all(&(self.header.len() as u32).to_le_bytes())?;
        w.write_all(self.header.as_bytes())?;
        w.write_all(&self.iteration.to_le_bytes())?;
        w.write_all(&(self.scalars.len() as u32).to_le_bytes())?;
        for (name, v) in &self.scalars {
            write_name(&mut w, name)?;
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_name(&mut w, name)?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                match self.dtype {
                    DType::F32 => w.write_all(&(v as f32).to_le_bytes())?,
                    DType::F64 => w.write_all(&v.to_le_bytes())?,
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingCheckpoint(path.to_path_buf())
            } else {
                Error::Io(e)
            }
        })?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 12];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let mut tags = [0u8; 2];
        read_exact(&mut r, &mut tags)?;
        let dtype = match tags[0] {
            1 => DType::F32,
            2 => DType::F64,
            d => return Err(bad(format!("unknown dtype tag {d}"))),
        };
        let kind = match tags[1] {
            1 => Kind::Autoencoder,
            2 => Kind::Denoiser,
            k => return Err(bad(format!("unknown model kind {k}"))),
        };
        let mut want = [0u8; 32];
        read_exact(&mut r, &mut want)?;
        let header = read_string(&mut r)?;
        if digest(&header) != want {
            return Err(bad("header digest mismatch"));
        }
        let iteration = read_u64(&mut r)?;
        let n_scalars = read_u32(&mut r)?;
        let mut scalars = Vec::new();
        for _ in 0..n_scalars {
            let name = read_string(&mut r)?;
            scalars.push((name, f64::from_le_bytes(read_arr(&mut r)?)));
        }
        let n_tensors = read_u32(&mut r)?;
        let mut tensors = Vec::new();
        for _ in 0..n_tensors {
            let name = read_string(&mut r)?;
            let rank = read_u32(&mut r)? as usize;
            if rank > 8 {
                return Err(bad(format!("tensor {name} has implausible rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(match dtype {
                    DType::F32 => f32::from_le_bytes(read_arr(&mut r)?) as f64,
                    DType::F64 => f64::from_le_bytes(read_arr(&mut r)?),
                });
            }
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        Ok(Self {
            dtype,
            kind,
            header,
            iteration,
            scalars,
            tensors,
        })
    }

    fn scalar(&self, name: &str) -> Option<f64> {
        self.scalars.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    fn tensor(&self, name: &str) -> Option<&Tensor<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn write_name(w: &mut impl Write, name: &str) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            bad("truncated checkpoint")
        } else {
            Error::Io(e)
        }
    })
}

fn read_arr<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b)?;
    Ok(b)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_arr(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_arr(r)?))
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let n = read_u32(r)? as usize;
    if n > 1 << 24 {
        return Err(bad("implausible string length"));
    }
    let mut b = vec![0u8; n];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|_| bad("header is not UTF-8"))
}

fn param_blocks<T: Scalar>(params: &ParamSet<T>, adam: Option<&Adam<T>>) -> Vec<(String, Tensor<f64>)> {
    let mut out: Vec<(String, Tensor<f64>)> =
        params.iter().map(|(n, t)| (format!("param.{n}"), t.cast())).collect();
    if let Some(a) = adam {
        for (i, (n, _)) in params.iter().enumerate() {
            out.push((format!("adam.m.{n}"), a.m[i].cast()));
            out.push((format!("adam.v.{n}"), a.v[i].cast()));
        }
    }
    out
}

fn read_std(raw: &RawCheckpoint, prefix: &str) -> Result<Standardizer> {
    let get = |k: &str| {
        raw.scalar(&format!("{prefix}.{k}"))
            .ok_or_else(|| bad(format!("missing {prefix}.{k}")))
    };
    Ok(Standardizer {
        center: get("center")?,
        scale: get("scale")?,
    })
}

fn restore_params<T: Scalar>(raw: &RawCheckpoint, params: &mut ParamSet<T>) -> Result<()> {
    for id in 0..params.len() {
        let name = params.name(id).to_string();
        let t = raw
            .tensor(&format!("param.{name}"))
            .ok_or_else(|| bad(format!("missing parameter {name}")))?;
        if t.shape() != params.get(id).shape() {
            return Err(bad(format!(
                "parameter {name}: stored shape {:?}, model expects {:?}",
                t.shape(),
                params.get(id).shape()
            )));
        }
        *params.get_mut(id) = t.cast();
    }
    Ok(())
}

/// Adam moments if every block is present.
fn restore_adam<T: Scalar>(raw: &RawCheckpoint, params: &ParamSet<T>) -> Option<(usize, Vec<Tensor<T>>, Vec<Tensor<T>>)> {
    let step = raw.scalar("adam.step")? as usize;
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (n, t) in params.iter() {
        let a = raw.tensor(&format!("adam.m.{n}"))?;
        let b = raw.tensor(&format!("adam.v.{n}"))?;
        if a.shape() != t.shape() || b.shape() != t.shape() {
            return None;
        }
        m.push(a.cast());
        v.push(b.cast());
    }
    Some((step, m, v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeHeader {
    pub rows: usize,
    pub cols: usize,
    pub arch: AeArch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserHeader {
    pub rows: usize,
    pub cols: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub schedule: ScheduleKind,
    pub mode: DiffusionMode,
    pub k_active: usize,
    pub denoiser: DenoiserConfig,
}

fn to_toml<S: Serialize>(h: &S) -> Result<String> {
    toml::to_string(h).map_err(|e| bad(format!("cannot serialize header: {e}")))
}

fn check_kind(raw: &RawCheckpoint, kind: Kind) -> Result<()> {
    if raw.kind != kind {
        return Err(bad(format!("expected a {kind:?} checkpoint, found {:?}", raw.kind)));
    }
    Ok(())
}

/// A loaded stage-1 model plus the optimizer state needed to resume.
#[derive(Debug, Clone)]
pub struct AeCheckpoint<T> {
    pub model: Autoencoder<T>,
    pub iteration: usize,
    pub adam: Option<(usize, Vec<Tensor<T>>, Vec<Tensor<T>>)>,
}

pub fn save_autoencoder<T: Scalar>(
    path: &Path,
    model: &Autoencoder<T>,
    iteration: usize,
    adam: Option<&Adam<T>>,
) -> Result<()> {
    let header = to_toml(&AeHeader {
        rows: model.rows,
        cols: model.cols,
        arch: model.arch.clone(),
    })?;
    let mut scalars = Vec::new();
    if let Some(s) = model.quant_scale {
        scalars.push(("quant_scale".to_string(), s));
    }
    scalars.push(("input.center".to_string(), model.input_std.center));
    scalars.push(("input.scale".to_string(), model.input_std.scale));
    if let Some(a) = adam {
        scalars.push(("adam.step".to_string(), a.step as f64));
    }
    RawCheckpoint {
        dtype: T::DTYPE,
        kind: Kind::Autoencoder,
        header,
        iteration: iteration as u64,
        scalars,
        tensors: param_blocks(&model.params, adam),
    }
    .write(path)
}

pub fn load_autoencoder<T: Scalar>(path: &Path) -> Result<AeCheckpoint<T>> {
    let raw = RawCheckpoint::read(path)?;
    check_kind(&raw, Kind::Autoencoder)?;
    let h: AeHeader =
        toml::from_str(&raw.header).map_err(|e| bad(format!("bad autoencoder header: {e}")))?;
    let mut model = Autoencoder::new(h.arch, h.rows, h.cols, 0)?;
    restore_params(&raw, &mut model.params)?;
    model.quant_scale = raw.scalar("quant_scale");
    model.input_std = read_std(&raw, "input")?;
    let adam = restore_adam(&raw, &model.params);
    Ok(AeCheckpoint {
        model,
        iteration: raw.iteration as usize,
        adam,
    })
}

impl<T: Scalar> AeTrainer<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_autoencoder(path, &self.model, self.iteration, Some(&self.adam))
    }

    /// Continue from a checkpoint; the architecture must match `arch`.
    pub fn resume(ckpt: AeCheckpoint<T>, arch: &AeArch, opts: &AeTrainOptions) -> Result<Self> {
        if &ckpt.model.arch != arch {
            return Err(bad("checkpoint architecture differs from the configured one"));
        }
        let mut adam = Adam::new(opts.optimizer, &ckpt.model.params);
        if let Some((step, m, v)) = ckpt.adam {
            adam.step = step;
            adam.m = m;
            adam.v = v;
        }
        let mut scale = ScaleTracker::new(opts.quant.scale_decay);
        scale.value = ckpt.model.quant_scale;
        let rates = ckpt.model.arch.training_rates().iter().map(|r| r.0).collect();
        Ok(Self {
            model: ckpt.model,
            adam,
            iteration: ckpt.iteration,
            scale,
            log: TrainLog {
                rates,
                rows: Vec::new(),
            },
        })
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserCheckpoint<T> {
    pub model: Denoiser<T>,
    pub header: DenoiserHeader,
    pub iteration: usize,
    pub adam: Option<(usize, Vec<Tensor<T>>, Vec<Tensor<T>>)>,
}

pub fn save_denoiser<T: Scalar>(
    path: &Path,
    model: &Denoiser<T>,
    header: &DenoiserHeader,
    iteration: usize,
    adam: Option<&Adam<T>>,
) -> Result<()> {
    let mut scalars = vec![
        ("data.center".to_string(), model.data_std.center),
        ("data.scale".to_string(), model.data_std.scale),
    ];
    if let Some(a) = adam {
        scalars.push(("adam.step".to_string(), a.step as f64));
    }
    RawCheckpoint {
        dtype: T::DTYPE,
        kind: Kind::Denoiser,
        header: to_toml(header)?,
        iteration: iteration as u64,
        scalars,
        tensors: param_blocks(&model.params, adam),
    }
    .write(path)
}

pub fn load_denoiser<T: Scalar>(path: &Path) -> Result<DenoiserCheckpoint<T>> {
    let raw = RawCheckpoint::read(path)?;
    check_kind(&raw, Kind::Denoiser)?;
    let h: DenoiserHeader =
        toml::from_str(&raw.header).map_err(|e| bad(format!("bad denoiser header: {e}")))?;
    let mut model = Denoiser::new(h.denoiser.clone(), h.rows, h.cols, h.n, 0)?;
    restore_params(&raw, &mut model.params)?;
    model.data_std = read_std(&raw, "data")?;
    let adam = restore_adam(&raw, &model.params);
    Ok(DenoiserCheckpoint {
        model,
        header: h,
        iteration: raw.iteration as usize,
        adam,
    })
}

impl<T: Scalar> DiffTrainer<T> {
    pub fn header(&self, opts: &DiffTrainOptions) -> DenoiserHeader {
        DenoiserHeader {
            rows: self.model.rows,
            cols: self.model.cols,
            n: opts.diffusion.n,
            schedule: opts.diffusion.schedule,
            mode: opts.diffusion.mode,
            k_active: opts.k_active,
            denoiser: self.model.config.clone(),
        }
    }

    pub fn save(&self, path: &Path, opts: &DiffTrainOptions) -> Result<()> {
        save_denoiser(path, &self.model, &self.header(opts), self.iteration, Some(&self.adam))
    }

    pub fn resume(ckpt: DenoiserCheckpoint<T>, opts: &DiffTrainOptions) -> Result<Self> {
        let fresh = DenoiserHeader {
            rows: ckpt.header.rows,
            cols: ckpt.header.cols,
            n: opts.diffusion.n,
            schedule: opts.diffusion.schedule,
            mode: opts.diffusion.mode,
            k_active: opts.k_active,
            denoiser: opts.diffusion.denoiser(),
        };
        if digest(&to_toml(&fresh)?) != digest(&to_toml(&ckpt.header)?) {
            return Err(bad("checkpoint configuration differs from the configured one"));
        }
        let mut adam = Adam::new(opts.diffusion.optimizer, &ckpt.model.params);
        if let Some((step, m, v)) = ckpt.adam {
            adam.step = step;
            adam.m = m;
            adam.v = v;
        }
        Ok(Self {
            model: ckpt.model,
            adam,
            schedule: make_schedule(opts.diffusion.n, opts.diffusion.schedule)?,
            iteration: ckpt.iteration,
            log: DiffLog::default(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::{ConvSpec, DecoderConfig, DepthPreset, EncoderConfig, MrlConfig};

    fn arch() -> AeArch {
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
            mrl: MrlConfig::default(),
        }
    }

    #[test]
    fn autoencoder_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ae.ckpt");
        let mut model = Autoencoder::<f32>::new(arch(), 4, 4, 9).unwrap();
        model.quant_scale = Some(1.75);
        save_autoencoder(&path, &model, 42, None).unwrap();
        let back = load_autoencoder::<f32>(&path).unwrap();
        assert_eq!(back.model, model);
        assert_eq!(back.iteration, 42);
        assert!(back.adam.is_none());
        let wide = load_autoencoder::<f64>(&path).unwrap();
        assert_eq!(wide.model.params.count(), model.params.count());
    }

    #[test]
    fn corrupt_and_missing_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ae.ckpt");
        assert!(matches!(
            load_autoencoder::<f32>(&path),
            Err(Error::MissingCheckpoint(_))
        ));
        let model = Autoencoder::<f32>::new(arch(), 4, 4, 9).unwrap();
        save_autoencoder(&path, &model, 1, None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[60] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_autoencoder::<f32>(&path), Err(Error::Checkpoint(_))));
        std::fs::write(&path, &bytes[..40]).unwrap();
        assert!(matches!(load_autoencoder::<f32>(&path), Err(Error::Checkpoint(_))));
        assert!(matches!(load_denoiser::<f32>(&path), Err(Error::Checkpoint(_))));
    }
}
