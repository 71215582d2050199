//! Every transform set of the ablation grid against one checkpoint.

use std::fmt::Write as _;

use tte_core::transforms::{format_set, AblationRow};
use tte_core::EnsembleModel;

use super::{check_fit, diff, limited, load_checkpoint, load_dataset, note_suite, pct, robust, suite};
use crate::config::{required, value, Config, Key};
use crate::error::Result;
use crate::output::RunDir;

pub const KEYS: &[Key] = &[
    required("checkpoint"),
    required("dataset"),
    value("limit", "0"),
    value("epsilon", "8/255"),
    value("steps", "50"),
    value("square_queries", "500"),
    value("restarts", "1"),
    value("pad", "4"),
    value("crop_seed", "0"),
    value("seed", "0"),
];

pub fn run(cfg: &Config, run: &mut RunDir) -> Result<()> {
    let model = load_checkpoint(cfg, "checkpoint", run)?;
    let data = limited(cfg, load_dataset(cfg, "dataset", run)?)?;
    check_fit(&model, &data)?;
    let suite = suite(cfg, data.classes)?;
    note_suite(run, &suite);
    let (pad, crop_seed) = (cfg.usize("pad")?, cfg.u64("crop_seed")?);

    let mut rows = Vec::new();
    for row in AblationRow::all() {
        let transforms = row.transforms(pad, crop_seed)?;
        let members = format_set(&transforms);
        let report = if row.is_baseline() {
            robust(&model, &data, &suite)?
        } else {
            robust(&EnsembleModel::wrap(&model, transforms), &data, &suite)?
        };
        rows.push((row, members, report));
    }
    let base_robust = rows[0].2.robust;
    let best = rows
        .iter()
        .enumerate()
        .skip(1)
        .fold(0, |b, (i, r)| if r.2.robust > rows[b].2.robust { i } else { b });

    let mut s = String::from("set,label,members,clean,robust,diff,best\n");
    let mut gains = 0;
    for (i, (row, members, r)) in rows.iter().enumerate() {
        let d = if row.is_baseline() {
            "-".to_string()
        } else {
            if r.robust > base_robust {
                gains += 1;
            }
            diff(r.robust, base_robust)
        };
        let _ = writeln!(
            s,
            "{},{},\"{members}\",{},{},{d},{}",
            row.name(),
            row.label(),
            pct(r.clean),
            pct(r.robust),
            i == best && i != 0
        );
    }
    run.note("rows_with_gain", format!("{gains}/{}", rows.len() - 1));
    run.write("report.csv", &s)
}
