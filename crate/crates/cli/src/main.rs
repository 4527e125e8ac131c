use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use rgbd_recon::pipeline::{self, PipelineConfig};

/// Offline RGB-D scene reconstruction.
#[derive(Parser)]
#[command(name = "rgbd-recon", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build fragments from windows of consecutive frames.
    MakeFragments { config: PathBuf },
    /// Register fragment pairs with ICP.
    RegisterFragments { config: PathBuf },
    /// Optimize the fragment graph and write the scene and trajectory.
    Integrate { config: PathBuf },
    /// Run all three stages.
    RunAll { config: PathBuf },
    /// Render the synthetic dataset named in the config.
    Synth { config: PathBuf },
}

fn load(path: &PathBuf) -> Result<PipelineConfig> {
    PipelineConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::MakeFragments { config } => {
            let frags = pipeline::make_fragments(&load(&config)?)?;
            println!("{} fragments", frags.len());
        }
        Command::RegisterFragments { config } => {
            let pairs = pipeline::register_fragments(&load(&config)?)?;
            println!("{} fragment pairs registered", pairs.len());
        }
        Command::Integrate { config } => {
            let report = pipeline::integrate(&load(&config)?)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::RunAll { config } => {
            let report = pipeline::run_all(&load(&config)?)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Synth { config } => {
            let cfg = load(&config)?;
            let poses = pipeline::synth(&cfg)?;
            println!("{} frames written to {}", poses.len(), cfg.ingest.dataset_root.display());
        }
    }
    Ok(())
}
