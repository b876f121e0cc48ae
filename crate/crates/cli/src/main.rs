//! `fcd` - pipeline driver. Each subcommand runs one stage with file-based
//! hand-offs under the output root and records a provenance manifest.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use fcd_core::config::RunConfig;
use fcd_core::pipeline::{self, Command};

#[derive(Parser)]
#[command(
    name = "fcd",
    version,
    about = "Weakly-supervised cloud detection: fixed-point translation, mask extraction, refinement"
)]
struct Cli {
    /// TOML configuration file; defaults apply for missing keys.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed: rewrites every stage seed deterministically.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output root (precedence: this flag, config `out_root`, $FCD_OUT, ./out).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Configuration overrides, e.g. --set gan.iterations=1000
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: CliCommand,
}

#[derive(Subcommand, Clone, Copy)]
enum CliCommand {
    /// Generate the synthetic scene corpus with exact ground truth.
    SynthData,
    /// Assign biome-stratified train/val/test splits and freeze band stats.
    Split,
    /// Train the fixed-point translation GAN on image-level labels.
    TrainFcd,
    /// Select the difference-map threshold and write scene masks.
    MakeMasks,
    /// Train the binary cloud/clear patch classifier for the CAM baselines.
    TrainCam,
    /// Write CAM/GradCAM/GradCAM++ masks with per-method thresholds.
    CamMasks,
    /// Train the refinement segmentation network on the frozen pseudo masks.
    TrainFcdplus,
    /// Fine-tune the refinement network on a small labeled fraction.
    Finetune,
    /// Compute test metrics, pseudo-mask quality, and hole counts.
    Evaluate,
    /// Emit table.csv and per-scene comparison panels from the report.
    Report,
}

impl From<CliCommand> for Command {
    fn from(c: CliCommand) -> Command {
        match c {
            CliCommand::SynthData => Command::SynthData,
            CliCommand::Split => Command::Split,
            CliCommand::TrainFcd => Command::TrainFcd,
            CliCommand::MakeMasks => Command::MakeMasks,
            CliCommand::TrainCam => Command::TrainCam,
            CliCommand::CamMasks => Command::CamMasks,
            CliCommand::TrainFcdplus => Command::TrainFcdplus,
            CliCommand::Finetune => Command::Finetune,
            CliCommand::Evaluate => Command::Evaluate,
            CliCommand::Report => Command::Report,
        }
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();

    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    if let Some(seed) = cli.seed {
        cfg.set_master_seed(seed);
    }
    let out_root = cli
        .out
        .or_else(|| cfg.out_root.clone())
        .or_else(|| std::env::var_os("FCD_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));

    let command: Command = cli.command.into();
    let manifest = pipeline::dispatch(command, &cfg, &out_root)
        .with_context(|| format!("{} failed", command.as_str()))?;
    println!(
        "{}: ok ({} outputs under {})",
        command.as_str(),
        manifest.outputs.len(),
        out_root.display()
    );
    Ok(())
}
