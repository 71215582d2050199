//! Experiment driver for the TTE workbench: each subcommand reads a flat
//! `key=value` config, writes its CSV/SVG reports into an output directory
//! and finishes with a `manifest.txt` that reruns it.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod svg;

use std::path::Path;

use config::{Config, Key};
use error::Result;
use output::RunDir;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Generate,
    Train,
    Attack,
    Ablate,
    Heatmap,
    Obfuscation,
    Mismatch,
    Certify,
}

impl Command {
    pub const ALL: [Command; 8] = [
        Command::Generate,
        Command::Train,
        Command::Attack,
        Command::Ablate,
        Command::Heatmap,
        Command::Obfuscation,
        Command::Mismatch,
        Command::Certify,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Train => "train",
            Command::Attack => "attack",
            Command::Ablate => "ablate",
            Command::Heatmap => "heatmap",
            Command::Obfuscation => "obfuscation",
            Command::Mismatch => "mismatch",
            Command::Certify => "certify",
        }
    }

    pub fn keys(self) -> &'static [Key] {
        use commands::*;
        match self {
            Command::Generate => generate::KEYS,
            Command::Train => train::KEYS,
            Command::Attack => attack::KEYS,
            Command::Ablate => ablate::KEYS,
            Command::Heatmap => heatmap::KEYS,
            Command::Obfuscation => obfuscation::KEYS,
            Command::Mismatch => mismatch::KEYS,
            Command::Certify => certify::KEYS,
        }
    }
}

/// Runs `cmd` on config text, writing every output under `out`.
pub fn run_text(cmd: Command, text: &str, out: &Path, seed: Option<u64>) -> Result<()> {
    use commands::*;
    let cfg = Config::from_text(text, cmd.keys(), seed)?;
    let mut dir = RunDir::create(out, cmd.name())?;
    match cmd {
        Command::Generate => generate::run(&cfg, &mut dir)?,
        Command::Train => train::run(&cfg, &mut dir)?,
        Command::Attack => attack::run(&cfg, &mut dir)?,
        Command::Ablate => ablate::run(&cfg, &mut dir)?,
        Command::Heatmap => heatmap::run(&cfg, &mut dir)?,
        Command::Obfuscation => obfuscation::run(&cfg, &mut dir)?,
        Command::Mismatch => mismatch::run(&cfg, &mut dir)?,
        Command::Certify => certify::run(&cfg, &mut dir)?,
    }
    dir.finish(&cfg)
}

/// [`run_text`] on a config file (a previous `manifest.txt` works too).
pub fn run(cmd: Command, config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let text = std::fs::read_to_string(config).map_err(|source| error::CliError::Io {
        path: config.display().to_string(),
        source,
    })?;
    run_text(cmd, &text, out, seed)
}
