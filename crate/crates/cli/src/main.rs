//! `dgae`: train, evaluate, visualize and sweep the autoencoders.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric abort, 4 I/O or
//! corrupt-file error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dgae_core::Error;

#[derive(Parser)]
#[command(name = "dgae", version, about = "Diffusion-decoder autoencoders at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct ConfigArgs {
    /// Config file of `key = value` lines; omit to use the defaults.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set optim.total_steps=500`. Repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output root; takes precedence over DGAE_OUT and the config's `out_dir`.
    #[arg(short, long, env = "DGAE_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train an autoencoder; the run directory is printed on success.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from the run directory's last checkpoint if present.
        #[arg(long)]
        resume: bool,
        /// Stop after this many steps in this invocation.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Evaluate a checkpoint on the held-out set and append a row to results.csv.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint to evaluate [default: the run directory's last.ckpt].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write side-by-side (original, reconstruction) images.
    Reconstruct {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of held-out images.
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Decode held-out latents several times with different sampler noise.
    Sample {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Decodes per latent.
        #[arg(long, default_value_t = 4)]
        samples: usize,
    },
    /// Project latents to RGB with a three-component PCA.
    LatentVis {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Second model to visualize alongside the first.
        #[arg(long, requires = "compare_checkpoint")]
        compare_config: Option<PathBuf>,
        #[arg(long)]
        compare_checkpoint: Option<PathBuf>,
        /// Fit one projection on both models' latents (needs equal channel counts).
        #[arg(long)]
        shared_basis: bool,
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
    /// Train and evaluate every (value, seed) cell along one axis.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// latent-size, spatial-f, decoder-scale, encoder-scale, discriminator-scale or latent-gen.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values [default: the axis's own list].
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
    },
    /// Train a latent generator on a trained autoencoder and write its convergence curve.
    LatentGen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print the resolved config, layer tables and parameter counts.
    Describe {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write the procedural dataset as PPM files plus a manifest.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Write the held-out evaluation set instead of the training set.
        #[arg(long)]
        eval: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Shape(_) | Error::Structure { .. } => 2,
        Error::Numeric { .. } | Error::Domain(_) => 3,
        Error::Io { .. } | Error::Corrupt(_) | Error::Format { .. } => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Train { cfg, resume, max_steps } => commands::train(&cfg, resume, max_steps),
        Command::Eval { cfg, checkpoint } => commands::eval(&cfg, checkpoint),
        Command::Reconstruct { cfg, checkpoint, count } => commands::reconstruct(&cfg, checkpoint, count),
        Command::Sample {
            cfg,
            checkpoint,
            count,
            samples,
        } => commands::sample(&cfg, checkpoint, count, samples),
        Command::LatentVis {
            cfg,
            checkpoint,
            compare_config,
            compare_checkpoint,
            shared_basis,
            count,
        } => commands::latent_vis(&cfg, checkpoint, compare_config, compare_checkpoint, shared_basis, count),
        Command::Sweep { cfg, axis, values, seeds } => commands::sweep(&cfg, &axis, values, seeds),
        Command::LatentGen { cfg, checkpoint } => commands::latent_gen(&cfg, checkpoint),
        Command::Describe { cfg } => commands::describe(&cfg),
        Command::GenData { cfg, eval } => commands::gen_data(&cfg, eval),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
