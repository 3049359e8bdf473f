use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use csi_jscc::autoencoder::{AeTrainOptions, AeTrainer, Autoencoder, CheSetup};
use csi_jscc::checkpoint::{load_autoencoder, load_denoiser, DenoiserCheckpoint};
use csi_jscc::config::RunConfig;
use csi_jscc::csi_data::{
    generate_synthetic, load_dataset, norm_stats_from_metadata, normalize, normalize_with,
    read_metadata, save_dataset, write_metadata, CsiDataset, NormStats,
};
use csi_jscc::diffusion::{make_schedule, DiffTrainOptions, DiffTrainer, Denoiser, DiffusionSchedule};
use csi_jscc::evaluation::{bench_throughput, sweep, BlerSettings, Pipeline, Refiner, Stage};
use csi_jscc::scalar::DType;
use csi_jscc::{Error, Scalar};

type Result<T> = anyhow::Result<T>;

macro_rules! dispatch {
    ($cfg:expr, $f:ident($($arg:expr),*)) => {
        match $cfg.run.dtype {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
        }
    };
}

/// Create the run directory and record the resolved config for `command`.
fn start(cfg: &RunConfig, command: &str) -> Result<()> {
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(format!("{command}.config.toml"));
    fs::write(&path, cfg.to_toml()?).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn generate_data(cfg: &RunConfig) -> Result<()> {
    start(cfg, "generate-data")?;
    let synth = cfg.data.synth();
    let data = generate_synthetic::<f32>(&synth, cfg.data.n_samples, cfg.run.seed)?;
    let (train, _) = data.split(cfg.data.n_train)?;
    let (_, stats) = normalize(&train, cfg.data.norm)?;
    let path = cfg.dataset_path();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    save_dataset(&data, &path)?;
    write_metadata(
        &cfg.metadata_path(),
        &stats,
        Some(&synth),
        &[
            ("n_samples", cfg.data.n_samples.to_string()),
            ("n_train", cfg.data.n_train.to_string()),
            ("seed", cfg.run.seed.to_string()),
        ],
    )?;
    println!("wrote {} samples to {}", data.len(), path.display());
    Ok(())
}

/// Normalized splits plus the statistics needed to undo the normalization.
struct Prepared<T> {
    train: CsiDataset<T>,
    test: CsiDataset<T>,
    stats: NormStats,
    mean_power: f64,
}

fn prepare<T: Scalar>(cfg: &RunConfig) -> Result<Prepared<T>> {
    let raw = load_dataset::<T>(&cfg.dataset_path())?;
    if raw.len() <= cfg.data.n_train {
        return Err(Error::Config(format!(
            "dataset holds {} samples, data.n_train is {}",
            raw.len(),
            cfg.data.n_train
        ))
        .into());
    }
    let (train, test) = raw.split(cfg.data.n_train)?;
    let meta = cfg.metadata_path();
    let stats = if meta.exists() {
        norm_stats_from_metadata(&read_metadata(&meta)?)?
    } else {
        normalize(&train, cfg.data.norm)?.1
    };
    let n_test = match cfg.eval.n_test {
        0 => test.len(),
        n => n.min(test.len()),
    };
    let test = if n_test < test.len() {
        test.split(n_test)?.0
    } else {
        test
    };
    Ok(Prepared {
        mean_power: train.mean_entry_power().as_f64(),
        train: normalize_with(&train, &stats),
        test: normalize_with(&test, &stats),
        stats,
    })
}

fn che<T>(cfg: &RunConfig, p: &Prepared<T>) -> CheSetup {
    CheSetup {
        cnr: cfg.che.cnr(),
        stats: p.stats,
        mean_power: p.mean_power,
    }
}

fn ae_options<T>(cfg: &RunConfig, p: &Prepared<T>) -> AeTrainOptions {
    AeTrainOptions {
        optimizer: cfg.ae.optimizer,
        channel: cfg.channel,
        quant: cfg.quant.settings(),
        quant_noiseless_link: cfg.quant.noiseless_link,
        che: che(cfg, p),
        seed: cfg.run.seed,
    }
}

fn diff_options<T>(cfg: &RunConfig, p: &Prepared<T>) -> DiffTrainOptions {
    DiffTrainOptions {
        diffusion: cfg.diff.clone(),
        channel: cfg.channel,
        k_active: cfg.ae.latent_k_max,
        che: che(cfg, p),
        seed: cfg.run.seed.wrapping_add(1),
    }
}

/// Iteration targets between checkpoints, ending at `total`.
fn milestones(from: usize, total: usize, every: usize) -> Vec<usize> {
    if every == 0 || from >= total {
        return vec![total];
    }
    let mut v: Vec<usize> = ((from / every + 1) * every..total).step_by(every).collect();
    v.push(total);
    v
}

pub fn train_ae(cfg: &RunConfig, resume: bool, every: usize) -> Result<()> {
    dispatch!(cfg, train_ae_typed(cfg, resume, every))
}

fn train_ae_typed<T: Scalar>(cfg: &RunConfig, resume: bool, every: usize) -> Result<()> {
    start(cfg, "train-ae")?;
    let p = prepare::<T>(cfg)?;
    let opts = ae_options(cfg, &p);
    let arch = cfg.ae.arch();
    let ckpt_path = cfg.ae_checkpoint_path();
    let log_path = cfg.run_dir().join("ae_log.csv");
    let mut trainer = if resume && ckpt_path.exists() {
        let t = AeTrainer::resume(load_autoencoder::<T>(&ckpt_path)?, &arch, &opts)?;
        println!("resuming autoencoder training at iteration {}", t.iteration);
        t
    } else {
        if log_path.exists() {
            fs::remove_file(&log_path)?;
        }
        AeTrainer::new(Autoencoder::for_data(arch, &p.train, cfg.run.seed)?, &opts)
    };
    let total = cfg.ae.optimizer.iterations;
    for target in milestones(trainer.iteration, total, every) {
        let result = trainer.train(&p.train, &opts, target);
        trainer.log.append_csv(&log_path)?;
        trainer.log.rows.clear();
        result?;
        trainer.save(&ckpt_path)?;
        println!("autoencoder iteration {} saved to {}", trainer.iteration, ckpt_path.display());
    }
    Ok(())
}

fn require_ae<T: Scalar>(cfg: &RunConfig) -> Result<Autoencoder<T>> {
    let path = cfg.ae_checkpoint_path();
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path).into());
    }
    Ok(load_autoencoder::<T>(&path)?.model)
}

fn require_denoiser<T: Scalar>(cfg: &RunConfig) -> Result<DenoiserCheckpoint<T>> {
    let path = cfg.diffusion_checkpoint_path();
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path).into());
    }
    Ok(load_denoiser::<T>(&path)?)
}

pub fn train_diffusion(cfg: &RunConfig, resume: bool, every: usize) -> Result<()> {
    dispatch!(cfg, train_diffusion_typed(cfg, resume, every))
}

fn train_diffusion_typed<T: Scalar>(cfg: &RunConfig, resume: bool, every: usize) -> Result<()> {
    let ae = require_ae::<T>(cfg).context("diffusion training needs a trained autoencoder")?;
    start(cfg, "train-diffusion")?;
    let p = prepare::<T>(cfg)?;
    let opts = diff_options(cfg, &p);
    let ckpt_path = cfg.diffusion_checkpoint_path();
    let log_path = cfg.run_dir().join("diffusion_log.csv");
    let mut trainer = if resume && ckpt_path.exists() {
        let t = DiffTrainer::resume(load_denoiser::<T>(&ckpt_path)?, &opts)?;
        println!("resuming diffusion training at iteration {}", t.iteration);
        t
    } else {
        if log_path.exists() {
            fs::remove_file(&log_path)?;
        }
        let model = Denoiser::for_data(cfg.diff.denoiser(), &p.train, cfg.diff.n, opts.seed)?;
        DiffTrainer::new(model, &opts)?
    };
    let total = cfg.diff.optimizer.iterations;
    for target in milestones(trainer.iteration, total, every) {
        let result = trainer.train(&p.train, &ae, &opts, target);
        trainer.log.append_csv(&log_path)?;
        trainer.log.rows.clear();
        result?;
        trainer.save(&ckpt_path, &opts)?;
        println!("denoiser iteration {} saved to {}", trainer.iteration, ckpt_path.display());
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    dispatch!(cfg, eval_typed(cfg))
}

fn eval_typed<T: Scalar>(cfg: &RunConfig) -> Result<()> {
    let ae = require_ae::<T>(cfg)?;
    let grid = cfg.eval_grid();
    let den = if grid.n_steps.iter().any(|&s| s > 0) {
        Some(require_denoiser::<T>(cfg)?)
    } else {
        None
    };
    start(cfg, "eval")?;
    let p = prepare::<T>(cfg)?;
    let sched = match &den {
        Some(d) => Some(make_schedule(d.header.n, d.header.schedule)?),
        None => None,
    };
    let pipeline = pipeline(cfg, &ae, den.as_ref(), sched.as_ref(), &p);
    let bler = cfg.eval.bler.then_some(BlerSettings {
        dl_snr_db: cfg.eval.dl_snr_db,
        symbols_per_block: cfg.eval.symbols_per_block,
        n_blocks: cfg.eval.n_blocks,
        n_subcarriers: cfg.data.n_subcarriers,
    });
    let table = sweep(&pipeline, &p.test, &grid, bler.as_ref(), cfg.run.seed)?;
    let dir = cfg.run_dir().join("eval");
    table.write_all(&dir)?;
    print!("{}", table.to_csv());
    println!("wrote {} rows to {}", table.rows.len(), dir.display());
    Ok(())
}

fn pipeline<'a, T: Scalar>(
    cfg: &RunConfig,
    ae: &'a Autoencoder<T>,
    den: Option<&'a DenoiserCheckpoint<T>>,
    sched: Option<&'a DiffusionSchedule>,
    p: &Prepared<T>,
) -> Pipeline<'a, T> {
    let refiner = match (den, sched) {
        (Some(d), Some(s)) => Some(Refiner {
            denoiser: &d.model,
            schedule: s,
            mode: d.header.mode,
            init: cfg.diff.init,
        }),
        _ => None,
    };
    Pipeline {
        model_id: cfg.run.tag.clone(),
        ae,
        refiner,
        channel: cfg.channel,
        quant: cfg.quant.settings(),
        stats: p.stats,
        mean_power: p.mean_power,
    }
}

pub fn bench(cfg: &RunConfig) -> Result<()> {
    dispatch!(cfg, bench_typed(cfg))
}

fn bench_typed<T: Scalar>(cfg: &RunConfig) -> Result<()> {
    let ae = require_ae::<T>(cfg)?;
    let den = require_denoiser::<T>(cfg)?;
    start(cfg, "bench")?;
    let p = prepare::<T>(cfg)?;
    let sched = make_schedule(den.header.n, den.header.schedule)?;
    let pipe = pipeline(cfg, &ae, Some(&den), Some(&sched), &p);
    let mut stages = vec![Stage::Encoder, Stage::Decoder];
    stages.extend(cfg.bench.steps.iter().map(|&s| Stage::Diffusion(s)));
    let b = &cfg.bench;
    let mut results = Vec::new();
    for stage in stages {
        let rate = bench_throughput(&pipe, p.test.tensor(), stage, b.batch_size, b.n_repeats, cfg.run.seed)?;
        println!("{:>14}: {rate:.3e} samples/s", stage.label());
        results.push((stage, rate));
    }
    write_bench(&cfg.run_dir().join("bench.csv"), &results, b.batch_size)?;
    let sampler: Vec<_> = results
        .iter()
        .filter_map(|(s, r)| match s {
            Stage::Diffusion(n) => Some((*n, *r)),
            _ => None,
        })
        .collect();
    if let (Some(lo), Some(hi)) = (sampler.iter().min_by_key(|x| x.0), sampler.iter().max_by_key(|x| x.0)) {
        if lo.0 != hi.0 {
            println!(
                "diffusion-{} / diffusion-{} throughput ratio: {:.3}",
                lo.0,
                hi.0,
                lo.1 / hi.1
            );
        }
    }
    Ok(())
}

/// `stage,batch_size,samples_per_s,ratio`, with `ratio` relative to the
/// slowest stage.
fn write_bench(path: &Path, results: &[(Stage, f64)], batch: usize) -> Result<()> {
    let Some(slowest) = results.iter().map(|r| r.1).min_by(f64::total_cmp) else {
        bail!("no stages benchmarked");
    };
    let mut s = String::from("stage,batch_size,samples_per_s,ratio\n");
    for (stage, rate) in results {
        writeln!(s, "{},{batch},{rate:.6e},{:.4}", stage.label(), rate / slowest)?;
    }
    fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::milestones;

    #[test]
    fn milestones_end_at_total() {
        assert_eq!(milestones(0, 10, 0), vec![10]);
        assert_eq!(milestones(0, 10, 4), vec![4, 8, 10]);
        assert_eq!(milestones(5, 10, 4), vec![8, 10]);
        assert_eq!(milestones(10, 10, 4), vec![10]);
    }
}
