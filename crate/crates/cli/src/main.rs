use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tte_cli::Command;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Test-time transformation ensembling experiments.
#[derive(Parser)]
#[command(name = "tte", version)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Args)]
struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's `seed` key.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Sub {
    /// Generate a synthetic glyph dataset (train and test split).
    Generate(Common),
    /// Train a classifier.
    Train(Common),
    /// Base vs TTE robust accuracy under the attack suite.
    Attack(Common),
    /// Robust accuracy of every transform set in the ablation grid.
    Ablate(Common),
    /// Per-crop-offset accuracy grids.
    Heatmap(Common),
    /// Attack-strength sweeps probing for gradient obfuscation.
    Obfuscation(Common),
    /// Train/test transform mismatch study.
    Mismatch(Common),
    /// Randomized-smoothing certification.
    Certify(Common),
}

fn main() -> ExitCode {
    let (cmd, c) = match Cli::parse().command {
        Sub::Generate(c) => (Command::Generate, c),
        Sub::Train(c) => (Command::Train, c),
        Sub::Attack(c) => (Command::Attack, c),
        Sub::Ablate(c) => (Command::Ablate, c),
        Sub::Heatmap(c) => (Command::Heatmap, c),
        Sub::Obfuscation(c) => (Command::Obfuscation, c),
        Sub::Mismatch(c) => (Command::Mismatch, c),
        Sub::Certify(c) => (Command::Certify, c),
    };
    match tte_cli::run(cmd, &c.config, &c.out, c.seed) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tte {}: {e}", cmd.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
