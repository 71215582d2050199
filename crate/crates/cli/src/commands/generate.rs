//! Synthetic glyph dataset, split into train and test files.

use std::fmt::Write as _;

use tte_core::data::{generate, Dataset, SynthConfig};

use crate::config::{value, Config, Key};
use crate::error::Result;
use crate::output::{sha256_file, RunDir};

pub const KEYS: &[Key] = &[
    value("count", "5000"),
    value("classes", "4"),
    value("height", "24"),
    value("width", "24"),
    value("train_fraction", "0.8"),
    value("seed", "0"),
];

fn class_counts(ds: &Dataset) -> Vec<usize> {
    let mut counts = vec![0; ds.classes];
    ds.labels.iter().for_each(|&y| counts[y] += 1);
    counts
}

pub fn run(cfg: &Config, run: &mut RunDir) -> Result<()> {
    let synth = SynthConfig::new(cfg.usize("count")?, cfg.usize("classes")?, cfg.usize("height")?, cfg.usize("width")?);
    let seed = cfg.u64("seed")?;
    let all = generate(&synth, seed)?;
    let (train, test) = all.split(cfg.f64("train_fraction")?, seed)?;
    let mut report = String::from("split,count");
    for c in 0..synth.classes {
        let _ = write!(report, ",class{c}");
    }
    report.push('\n');
    for (name, ds) in [("train", &train), ("test", &test)] {
        let path = run.path(&format!("{name}.tted"));
        ds.save(&path)?;
        run.note(&format!("{name}_sha256"), sha256_file(&path)?);
        let counts: Vec<String> = class_counts(ds).iter().map(ToString::to_string).collect();
        let _ = writeln!(report, "{name},{},{}", ds.len(), counts.join(","));
    }
    run.write("report.csv", &report)
}
