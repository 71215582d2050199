//! Randomized-smoothing certification of the base model and its TTE
//! wrapping at several noise levels, with certified-accuracy curves and
//! their envelope across noise levels.

use std::fmt::Write as _;

use tte_core::certify::{acr, certified_curve, certify_dataset, envelope, radius_grid, results_csv, SmoothingConfig};
use tte_core::transforms::format_set;
use tte_core::{Classifier, EnsembleModel};

use super::{check_fit, limited, load_checkpoint, load_dataset, pct, transform_set};
use crate::config::{optional, required, value, Config, Key};
use crate::error::{config_err, CliError, Result};
use crate::output::{sha256_file, RunDir};
use crate::svg;

pub const KEYS: &[Key] = &[
    optional("checkpoint"),
    optional("checkpoints"),
    required("dataset"),
    value("limit", "0"),
    value("sigmas", "0.12,0.25,0.5"),
    value("n0", "32"),
    value("n", "1000"),
    value("alpha", "0.001"),
    value("batch_size", "256"),
    value("transforms", "flip"),
    value("pad", "4"),
    value("crop_seed", "0"),
    value("radius_max", "2.0"),
    value("radius_step", "0.05"),
    value("seed", "0"),
];

pub const MODELS: [&str; 2] = ["base", "tte"];

/// One checkpoint per σ from `checkpoints`, or the single `checkpoint` for
/// every σ.
fn models(cfg: &Config, sigmas: usize, run: &mut RunDir) -> Result<Vec<Classifier>> {
    match (cfg.has("checkpoint"), cfg.has("checkpoints")) {
        (true, false) => {
            let m = load_checkpoint(cfg, "checkpoint", run)?;
            Ok(vec![m; sigmas])
        }
        (false, true) => {
            let paths: Vec<&str> = cfg.str("checkpoints")?.split(',').map(str::trim).collect();
            if paths.len() != sigmas {
                return Err(config_err(format!(
                    "key `checkpoints`: {} paths for {sigmas} sigmas",
                    paths.len()
                )));
            }
            paths
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let path = std::path::Path::new(p);
                    if !path.is_file() {
                        return Err(config_err(format!("key `checkpoints`: no such file {p}")));
                    }
                    run.note(&format!("checkpoints.{i}_sha256"), sha256_file(path)?);
                    Ok(Classifier::load(path)?)
                })
                .collect()
        }
        _ => Err(config_err("exactly one of `checkpoint` and `checkpoints` is required")),
    }
}

pub fn run(cfg: &Config, run: &mut RunDir) -> Result<()> {
    let sigmas = cfg.f64_list("sigmas")?;
    if sigmas.is_empty() {
        return Err(config_err("key `sigmas`: needs at least one value"));
    }
    let models = models(cfg, sigmas.len(), run)?;
    let data = limited(cfg, load_dataset(cfg, "dataset", run)?)?;
    for m in &models {
        check_fit(m, &data)?;
    }
    let transforms = transform_set(cfg, "transforms")?;
    run.note("transform_set", format_set(&transforms));
    let grid = radius_grid(cfg.f64("radius_max")?, cfg.f64("radius_step")?);

    let mut report = String::from("sigma,model,acr,certified_accuracy_at_0,abstain_rate\n");
    // curves[model][sigma]
    let mut curves: [Vec<Vec<(f64, f64)>>; 2] = [Vec::new(), Vec::new()];
    for (&sigma, model) in sigmas.iter().zip(&models) {
        let sc = SmoothingConfig {
            sigma,
            n0: cfg.usize("n0")?,
            n: cfg.usize("n")?,
            alpha: cfg.f64("alpha")?,
            batch_size: cfg.usize("batch_size")?,
            seed: cfg.u64("seed")?,
        };
        sc.validate()?;
        let tte = EnsembleModel::wrap(model, transforms.clone());
        let mut legend = Vec::new();
        for (m, name) in MODELS.iter().enumerate() {
            let results = if m == 0 { certify_dataset(model, &data, &sc)? } else { certify_dataset(&tte, &data, &sc)? };
            let a = acr(&results)?;
            let curve = certified_curve(&results, &grid)?;
            if curve.windows(2).any(|w| w[1].1 > w[0].1) {
                return Err(CliError::Numerical(format!("{name} curve at sigma={sigma} increases")));
            }
            let abstain = results.iter().filter(|r| r.prediction.is_none()).count() as f64 / results.len() as f64;
            let _ = writeln!(report, "{sigma},{name},{a:.6},{},{}", pct(curve[0].1), pct(abstain));
            run.write(&format!("results_sigma{sigma}_{name}.csv"), &results_csv(&results))?;
            legend.push((format!("{name} (ACR {a:.3})"), curve.clone()));
            curves[m].push(curve);
        }
        run.write(
            &format!("panel_sigma{sigma}.svg"),
            &svg::curves(&format!("sigma = {sigma}"), "radius", "certified accuracy", &legend),
        )?;
    }

    let envelopes = [envelope(&curves[0])?, envelope(&curves[1])?];
    for (m, env) in envelopes.iter().enumerate() {
        let dominated = curves[m].iter().all(|c| c.iter().zip(env).all(|(p, e)| e.1 >= p.1));
        if !dominated {
            return Err(CliError::Numerical(format!("{} envelope below a curve", MODELS[m])));
        }
    }
    let mut csv = String::from("radius");
    for name in MODELS {
        for sigma in &sigmas {
            let _ = write!(csv, ",{name}_sigma{sigma}");
        }
        let _ = write!(csv, ",{name}_envelope");
    }
    csv.push('\n');
    for (i, &r) in grid.iter().enumerate() {
        let _ = write!(csv, "{r:.4}");
        for m in 0..2 {
            for c in &curves[m] {
                let _ = write!(csv, ",{:.6}", c[i].1);
            }
            let _ = write!(csv, ",{:.6}", envelopes[m][i].1);
        }
        csv.push('\n');
    }
    let env_series: Vec<(String, Vec<(f64, f64)>)> =
        MODELS.iter().zip(&envelopes).map(|(n, e)| (format!("{n} envelope"), e.clone())).collect();
    run.write("envelope.svg", &svg::curves("envelope over sigma", "radius", "certified accuracy", &env_series))?;
    run.write("curves.csv", &csv)?;
    run.write("report.csv", &report)
}
