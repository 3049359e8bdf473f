//! `csi-jscc`: data generation, two-stage training, evaluation sweeps and
//! throughput benchmarks driven by one TOML config per run.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use csi_jscc::config::RunConfig;

/// Exit codes beyond clap's own usage errors (which also exit with 2).
const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

#[derive(Parser)]
#[command(name = "csi-jscc", version, about = "Two-stage CSI feedback: autoencoder plus residual-diffusion refinement")]
#[command(after_help = "Config precedence, lowest first: built-in defaults, --config file, --set overrides in order.\n\
Every command writes its outputs and the fully resolved config under run.out_dir/run.tag.\n\
Exit codes: 0 ok, 1 other failure, 2 config error, 3 missing or unreadable input / I/O error, 4 training diverged.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run config; built-in defaults are used when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set ae.optimizer.iterations=2000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset container and its metadata sidecar.
    GenerateData {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the stage-1 autoencoder.
    TrainAe {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from the run's checkpoint if it exists.
        #[arg(long)]
        resume: bool,
        /// Save a checkpoint every N iterations (0: only at the end).
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
    },
    /// Train the stage-2 denoiser against the frozen autoencoder.
    TrainDiffusion {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        resume: bool,
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
    },
    /// Evaluate the sweep grid in `[eval]` and write metrics plus plot data.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Stop after the autoencoder (forces eval.n_steps = [0]).
        #[arg(long)]
        stage1_only: bool,
    },
    /// Time encoder, decoder and sampler throughput.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn load(args: &ConfigArgs) -> anyhow::Result<RunConfig> {
    Ok(RunConfig::load(args.config.as_deref(), &args.overrides)?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenerateData { cfg } => commands::generate_data(&load(&cfg)?),
        Command::TrainAe {
            cfg,
            resume,
            checkpoint_every,
        } => commands::train_ae(&load(&cfg)?, resume, checkpoint_every),
        Command::TrainDiffusion {
            cfg,
            resume,
            checkpoint_every,
        } => commands::train_diffusion(&load(&cfg)?, resume, checkpoint_every),
        Command::Eval { cfg, stage1_only } => {
            let mut c = load(&cfg)?;
            if stage1_only {
                c.eval.n_steps = vec![0];
            }
            commands::eval(&c)
        }
        Command::Bench { cfg } => commands::bench(&load(&cfg)?),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use csi_jscc::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) | E::InvalidArgument(_) => EXIT_CONFIG,
                E::Diverged { .. } => EXIT_DIVERGED,
                E::Io(_) | E::Load(_) | E::MissingCheckpoint(_) | E::Checkpoint(_) => EXIT_IO,
                _ => EXIT_FAILURE,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_FAILURE
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
