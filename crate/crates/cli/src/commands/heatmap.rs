//! Robustness of every crop offset, alone and alongside the original image.

use std::fmt::Write as _;

use tte_core::attacks::RobustReport;
use tte_core::transforms::enumerate_crops;
use tte_core::{EnsembleModel, TransformSpec, Transformed};

use super::{check_fit, limited, load_checkpoint, load_dataset, note_suite, pct, robust, suite};
use crate::config::{required, value, Config, Key};
use crate::error::{config_err, Result};
use crate::output::RunDir;
use crate::svg;

pub const KEYS: &[Key] = &[
    required("checkpoint"),
    required("dataset"),
    value("limit", "0"),
    value("pad", "4"),
    value("epsilon", "8/255"),
    value("steps", "50"),
    value("square_queries", "500"),
    value("restarts", "1"),
    value("seed", "0"),
];

pub const MODES: [&str; 2] = ["crop_only", "original_plus_crop"];

/// Rows indexed by `o_y`, columns by `o_x`.
fn grid_csv(grid: &[Vec<f64>]) -> String {
    let mut s = String::from("o_y");
    for x in 0..grid.len() {
        let _ = write!(s, ",o_x={x}");
    }
    s.push('\n');
    for (y, row) in grid.iter().enumerate() {
        let _ = write!(s, "{y}");
        for &v in row {
            let _ = write!(s, ",{}", pct(v));
        }
        s.push('\n');
    }
    s
}

/// Mean absolute gap, in points, between each cell and its left-right
/// mirror; zero for a perfectly symmetric grid.
pub fn mirror_gap(grid: &[Vec<f64>]) -> f64 {
    let side = grid.len();
    let mut total = 0.0;
    for row in grid {
        for x in 0..side {
            total += (row[x] - row[side - 1 - x]).abs();
        }
    }
    100.0 * total / (side * side) as f64
}

pub fn run(cfg: &Config, run: &mut RunDir) -> Result<()> {
    let model = load_checkpoint(cfg, "checkpoint", run)?;
    let data = limited(cfg, load_dataset(cfg, "dataset", run)?)?;
    check_fit(&model, &data)?;
    let pad = cfg.usize("pad")?;
    if pad == 0 {
        return Err(config_err("key `pad`: must be at least 1"));
    }
    let suite = suite(cfg, data.classes)?;
    note_suite(run, &suite);
    let side = 2 * pad + 1;

    let base = robust(&model, &data, &suite)?;
    let mut long = String::from("mode,o_x,o_y,clean,robust\n");
    let _ = writeln!(long, "base,-,-,{},{}", pct(base.clean), pct(base.robust));
    for mode in MODES {
        let mut clean = vec![vec![0.0; side]; side];
        let mut rob = vec![vec![0.0; side]; side];
        for spec in enumerate_crops(pad) {
            let TransformSpec::PadCrop { o_x, o_y, .. } = spec else {
                unreachable!("enumerate_crops yields pad-crops")
            };
            let r: RobustReport = if mode == "crop_only" {
                robust(&Transformed::new(&model, spec)?, &data, &suite)?
            } else {
                robust(&EnsembleModel::wrap(&model, vec![spec]), &data, &suite)?
            };
            clean[o_y][o_x] = r.clean;
            rob[o_y][o_x] = r.robust;
            let _ = writeln!(long, "{mode},{o_x},{o_y},{},{}", pct(r.clean), pct(r.robust));
        }
        for (metric, grid) in [("clean", &clean), ("robust", &rob)] {
            run.write(&format!("{mode}_{metric}.csv"), &grid_csv(grid))?;
            run.write(&format!("{mode}_{metric}.svg"), &svg::heatmap(&format!("{mode} {metric} accuracy"), grid))?;
            run.note(&format!("{mode}_{metric}_mirror_gap"), format!("{:.4}", mirror_gap(grid)));
        }
    }
    run.write("report.csv", &long)
}

#[cfg(test)]
mod tests {
    use super::mirror_gap;

    #[test]
    fn mirror_gap_of_symmetric_grid_is_zero() {
        let g = vec![vec![0.1, 0.5, 0.1], vec![0.2, 0.9, 0.2], vec![0.0, 0.0, 0.0]];
        assert_eq!(mirror_gap(&g), 0.0);
        let h = vec![vec![1.0, 0.0], vec![0.0, 0.0]];
        assert!((mirror_gap(&h) - 50.0).abs() < 1e-12);
    }
}
