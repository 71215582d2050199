//! Iteration and budget sweeps of APGD-CE, plus a black-box comparison, for
//! the base model and its largest TTE wrapping.

use std::fmt::Write as _;

use tte_core::attacks::{obfuscation_sweep, robust_accuracy, AttackConfig, AttackKind, Batch, ObfuscationTable, SuiteEntry, SweepConfig};
use tte_core::transforms::format_set;
use tte_core::{EnsembleModel, Model};

use super::{check_fit, limited, load_checkpoint, load_dataset, pct, transform_set};
use crate::config::{required, value, Config, Key};
use crate::error::Result;
use crate::output::RunDir;

pub const KEYS: &[Key] = &[
    required("checkpoint"),
    required("dataset"),
    value("transforms", "flip+4crops+4flipped"),
    value("limit", "0"),
    value("iterations", "5,10,50,100"),
    value("epsilons", "8/255,16/255,32/255,64/255"),
    value("fixed_epsilon", "8/255"),
    value("fixed_iterations", "100"),
    value("square_queries", "1000"),
    value("pad", "4"),
    value("crop_seed", "0"),
    value("seed", "0"),
];

/// Largest rise, in points, along a sequence that should not increase.
fn worst_rise(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.windows(2).map(|w| 100.0 * (w[1] - w[0])).fold(0.0, f64::max)
}

struct Row {
    table: ObfuscationTable,
    whitebox: f64,
    square: f64,
}

fn sweep<M: Model + ?Sized>(model: &M, batch: &Batch, sweep: &SweepConfig, queries: usize) -> Result<Row> {
    let table = obfuscation_sweep(model, batch, sweep)?;
    let eps = sweep.fixed_epsilon;
    // the iteration sweep already ran APGD-CE at the fixed point when the grid contains it
    let whitebox = match table.by_iterations.iter().find(|p| p.0 == sweep.fixed_iterations) {
        Some(&(_, a)) => a,
        None => {
            let cfg = AttackConfig::apgd_ce(eps, sweep.fixed_iterations).with_seed(sweep.seed);
            robust_accuracy(model, batch, &[SuiteEntry::new("APGD-CE", AttackKind::Apgd, cfg)])?.robust
        }
    };
    let square = SuiteEntry::new("Square", AttackKind::Square, AttackConfig::square(eps, queries).with_seed(sweep.seed));
    let square = robust_accuracy(model, batch, &[square])?.robust;
    Ok(Row { table, whitebox, square })
}

pub fn run(cfg: &Config, run: &mut RunDir) -> Result<()> {
    let model = load_checkpoint(cfg, "checkpoint", run)?;
    let data = limited(cfg, load_dataset(cfg, "dataset", run)?)?;
    check_fit(&model, &data)?;
    let transforms = transform_set(cfg, "transforms")?;
    run.note("transform_set", format_set(&transforms));
    let sc = SweepConfig {
        iterations: cfg.usize_list("iterations")?,
        epsilons: cfg.f64_list("epsilons")?,
        fixed_epsilon: cfg.f64("fixed_epsilon")?,
        fixed_iterations: cfg.usize("fixed_iterations")?,
        seed: cfg.u64("seed")?,
    };
    let queries = cfg.usize("square_queries")?;
    let batch = Batch::from_dataset(&data);
    let rows = [
        ("base", sweep(&model, &batch, &sc, queries)?),
        ("tte", sweep(&EnsembleModel::wrap(&model, transforms), &batch, &sc, queries)?),
    ];

    let mut s = String::from("method");
    for (i, _) in &rows[0].1.table.by_iterations {
        let _ = write!(s, ",iterations={i}");
    }
    for (e, _) in &rows[0].1.table.by_epsilon {
        let _ = write!(s, ",epsilon={}/255", fmt_255(*e));
    }
    s.push('\n');
    let mut checks = String::from("method,apgd_ce,square,whitebox_le_blackbox,rise_over_iterations,rise_over_epsilon\n");
    for (name, row) in &rows {
        let _ = write!(s, "{name}");
        for &(_, a) in row.table.by_iterations.iter() {
            let _ = write!(s, ",{}", pct(a));
        }
        for &(_, a) in row.table.by_epsilon.iter() {
            let _ = write!(s, ",{}", pct(a));
        }
        s.push('\n');
        let _ = writeln!(
            checks,
            "{name},{},{},{},{:.2},{:.2}",
            pct(row.whitebox),
            pct(row.square),
            row.whitebox <= row.square,
            worst_rise(row.table.by_iterations.iter().map(|p| p.1)),
            worst_rise(row.table.by_epsilon.iter().map(|p| p.1)),
        );
    }
    run.write("checks.csv", &checks)?;
    run.write("report.csv", &s)
}

/// `8/255` style label for an ε given as a fraction of the pixel range.
fn fmt_255(eps: f64) -> String {
    let v = eps * 255.0;
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round())
    } else {
        format!("{v:.3}")
    }
}
