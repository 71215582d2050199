//! Base model and its TTE wrapping under the attack suite, side by side.

use tte_core::attacks::RobustReport;
use tte_core::transforms::format_set;
use tte_core::EnsembleModel;

use super::{check_fit, diff, limited, load_checkpoint, load_dataset, note_suite, pct, robust, suite, transform_set};
use crate::config::{required, value, Config, Key};
use crate::error::{CliError, Result};
use crate::output::RunDir;

pub const KEYS: &[Key] = &[
    required("checkpoint"),
    required("dataset"),
    value("transforms", "flip+1crop"),
    value("limit", "0"),
    value("epsilon", "8/255"),
    value("steps", "50"),
    value("square_queries", "500"),
    value("restarts", "1"),
    value("pad", "4"),
    value("crop_seed", "0"),
    value("seed", "0"),
];

fn rows(r: &RobustReport) -> Vec<(String, f64)> {
    let mut v = vec![("Clean".to_string(), r.clean)];
    v.extend(r.attacks.iter().cloned());
    v.push(("Robust".to_string(), r.robust));
    v
}

/// `metric,base,tte,difference` with one row per metric, in percent.
pub fn side_by_side(base: &RobustReport, tte: &RobustReport) -> Result<String> {
    let mut s = String::from("metric,base,tte,difference\n");
    for ((name, b), (_, t)) in rows(base).into_iter().zip(rows(tte)) {
        s.push_str(&format!("{name},{},{},{}\n", pct(b), pct(t), diff(t, b)));
    }
    for r in [base, tte] {
        if r.attacks.iter().any(|&(_, a)| r.robust > a) || r.robust > r.clean {
            return Err(CliError::Numerical("robust accuracy exceeds an attack column".into()));
        }
    }
    Ok(s)
}

pub fn run(cfg: &Config, run: &mut RunDir) -> Result<()> {
    let model = load_checkpoint(cfg, "checkpoint", run)?;
    let data = limited(cfg, load_dataset(cfg, "dataset", run)?)?;
    check_fit(&model, &data)?;
    let transforms = transform_set(cfg, "transforms")?;
    let suite = suite(cfg, data.classes)?;
    run.note("transform_set", format_set(&transforms));
    note_suite(run, &suite);
    let base = robust(&model, &data, &suite)?;
    let tte = robust(&EnsembleModel::wrap(&model, transforms), &data, &suite)?;
    run.write("report.csv", &side_by_side(&base, &tte)?)
}
