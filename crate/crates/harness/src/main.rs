use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use film_denoise::commands;
use film_denoise::config::{Command, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "film-denoise", version, about = "Noise-conditional FiLM U-Net denoiser experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Model checkpoint (.fuw).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory, overriding `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed, overriding `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write a checkpoint plus loss report.
    Train(Common),
    /// Evaluate a checkpoint over sigma_tr x sigma_val grids.
    Sweep(Common),
    /// Denoise one PNG through the patch pipeline.
    Denoise(Common),
    /// Score checkpoints and external outputs on identical corrupted inputs.
    Compare(Common),
    /// Write a synthetic CIFAR-format dataset for smoke runs.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2400)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn init_threads() -> Result<()> {
    let n = match std::env::var("FILM_DENOISE_THREADS") {
        Ok(v) => v.trim().parse::<usize>().with_context(|| format!("FILM_DENOISE_THREADS=`{v}` is not a number"))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn load(c: &Common, command: Command) -> Result<ExperimentConfig> {
    let o = Overrides { seed: c.seed, out_dir: c.out.clone(), checkpoint: c.checkpoint.clone() };
    ExperimentConfig::load(&c.config, command, &o)
}

fn need_checkpoint(c: &Common) -> Result<&PathBuf> {
    c.checkpoint.as_ref().context("--checkpoint is required for this command")
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_threads()?;
    match Cli::parse().command {
        Cmd::Train(c) => {
            let cfg = load(&c, Command::Train)?;
            let out = commands::cmd_train(&cfg)?;
            println!("checkpoint: {}", out.checkpoint.display());
        }
        Cmd::Sweep(c) => {
            let cfg = load(&c, Command::Sweep)?;
            let rows = commands::cmd_sweep(&cfg, need_checkpoint(&c)?)?;
            println!("{} rows written to {}", rows.len(), cfg.out_dir.join("sweep.csv").display());
        }
        Cmd::Denoise(c) => {
            let cfg = load(&c, Command::Denoise)?;
            let path = commands::cmd_denoise(&cfg, need_checkpoint(&c)?)?;
            println!("wrote {}", path.display());
        }
        Cmd::Compare(c) => {
            let cfg = load(&c, Command::Compare)?;
            let out = commands::cmd_compare(&cfg)?;
            println!("{} rows written to {}", out.rows.len(), cfg.out_dir.join("compare.csv").display());
        }
        Cmd::MakeSynthetic { out, count, seed } => {
            film_denoise_core::synth::write_cifar_like(&out, count, seed)?;
            println!("wrote {count} images to {}", out.display());
        }
    }
    Ok(())
}
