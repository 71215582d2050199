//! One module per subcommand, plus the loading and evaluation helpers they
//! share.

use std::path::Path;

use tte_core::attacks::{standard_suite, Batch, RobustReport, SuiteEntry};
use tte_core::data::Dataset;
use tte_core::model::Model;
use tte_core::train::Regime;
use tte_core::transforms::{parse_set, AblationRow, TransformSpec};
use tte_core::Classifier;

use crate::config::Config;
use crate::error::{config_err, CliError, Result};
use crate::output::{sha256_file, RunDir};

pub mod ablate;
pub mod attack;
pub mod certify;
pub mod generate;
pub mod heatmap;
pub mod mismatch;
pub mod obfuscation;
pub mod train;

fn missing_file(key: &str, path: &Path) -> CliError {
    config_err(format!("key `{key}`: no such file {}", path.display()))
}

pub(crate) fn load_dataset(cfg: &Config, key: &str, run: &mut RunDir) -> Result<Dataset> {
    let path = cfg.path(key)?;
    if !path.is_file() {
        return Err(missing_file(key, &path));
    }
    run.note(&format!("{key}_sha256"), sha256_file(&path)?);
    Ok(Dataset::load(&path)?)
}

pub(crate) fn load_checkpoint(cfg: &Config, key: &str, run: &mut RunDir) -> Result<Classifier> {
    let path = cfg.path(key)?;
    if !path.is_file() {
        return Err(missing_file(key, &path));
    }
    run.note(&format!("{key}_sha256"), sha256_file(&path)?);
    Ok(Classifier::load(&path)?)
}

/// Rejects a model whose input or label space differs from the dataset's.
pub(crate) fn check_fit(model: &Classifier, data: &Dataset) -> Result<()> {
    let a = model.arch;
    let [c, h, w] = data.image_dims();
    if [c, h, w] != [a.channels, a.height, a.width] || data.classes != a.classes {
        return Err(config_err(format!(
            "checkpoint expects {}x{}x{} images with {} classes, dataset has {c}x{h}x{w} with {}",
            a.channels, a.height, a.width, a.classes, data.classes
        )));
    }
    Ok(())
}

/// The first `limit` instances (all when `limit` is 0).
pub(crate) fn limited(cfg: &Config, data: Dataset) -> Result<Dataset> {
    let limit = cfg.usize("limit")?;
    Ok(if limit == 0 { data } else { data.head(limit) })
}

/// APGD-CE, APGD-T and Square from the `epsilon`, `steps`,
/// `square_queries`, `restarts` and `seed` keys.
pub(crate) fn suite(cfg: &Config, classes: usize) -> Result<Vec<SuiteEntry>> {
    let epsilon = cfg.f64("epsilon")?;
    let restarts = cfg.usize("restarts")?;
    let mut suite = standard_suite(epsilon, cfg.usize("steps")?, cfg.usize("square_queries")?, classes, cfg.u64("seed")?);
    for entry in &mut suite {
        entry.config = entry.config.with_restarts(restarts);
        entry.config.validate().map_err(|e| config_err(e.to_string()))?;
    }
    Ok(suite)
}

pub(crate) fn note_suite(run: &mut RunDir, suite: &[SuiteEntry]) {
    for entry in suite {
        run.note(&format!("attack.{}", entry.name), entry.describe());
    }
    run.note("excluded_attacks", "FAB-T");
}

/// A named ablation row (`flip+1crop`, `none`, ...) or an explicit token
/// list (`flip,padcrop(1,7,4)`), using the `pad` and `crop_seed` keys.
pub(crate) fn transform_set(cfg: &Config, key: &str) -> Result<Vec<TransformSpec>> {
    let text = cfg.str(key)?;
    let specs = match text.parse::<AblationRow>() {
        Ok(row) => row.transforms(cfg.usize("pad")?, cfg.u64("crop_seed")?),
        Err(_) => parse_set(text),
    };
    specs.map_err(|e| config_err(format!("key `{key}`: {e}")))
}

pub(crate) fn regime(cfg: &Config) -> Result<Regime> {
    let need = |key: &str, name: &str| -> Result<f64> {
        if !cfg.has(key) {
            return Err(config_err(format!("regime={name} requires key `{key}`")));
        }
        cfg.f64(key)
    };
    let name = cfg.str("regime")?;
    let steps = cfg.usize("train_steps")?;
    Ok(match name {
        "nominal" => Regime::Nominal,
        "adversarial" => {
            let epsilon = need("train_epsilon", name)?;
            let step_size = if cfg.has("train_step_size") {
                cfg.f64("train_step_size")?
            } else {
                epsilon / 4.0
            };
            Regime::Adversarial {
                epsilon,
                steps,
                step_size,
            }
        }
        "gaussian" => Regime::Gaussian {
            sigma: need("sigma", name)?,
        },
        "smoothadv" => Regime::SmoothAdv {
            sigma: need("sigma", name)?,
            epsilon: need("train_epsilon", name)?,
            steps,
        },
        other => {
            return Err(config_err(format!(
                "key `regime`: expected nominal, adversarial, gaussian or smoothadv, got `{other}`"
            )))
        }
    })
}

pub(crate) fn robust<M: Model + ?Sized>(model: &M, data: &Dataset, suite: &[SuiteEntry]) -> Result<RobustReport> {
    Ok(tte_core::attacks::robust_accuracy(model, &Batch::from_dataset(data), suite)?)
}

/// Percentage with two decimals.
pub(crate) fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

/// Signed percentage-point difference with two decimals.
pub(crate) fn diff(a: f64, b: f64) -> String {
    let d = 100.0 * (a - b);
    // keep "0.00" rather than "-0.00"
    let d = if d.abs() < 0.005 { 0.0 } else { d };
    format!("{d:.2}")
}
