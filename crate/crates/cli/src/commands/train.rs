//! Trains a classifier and saves its checkpoint.

use std::fmt::Write as _;

use tte_core::model::Architecture;
use tte_core::train::{evaluate_clean, train, TrainConfig};
use tte_core::Classifier;

use super::{load_dataset, regime};
use crate::config::{optional, required, value, Config, Key};
use crate::error::Result;
use crate::output::{sha256_file, RunDir};

pub const KEYS: &[Key] = &[
    required("dataset"),
    optional("test_dataset"),
    required("regime"),
    optional("train_epsilon"),
    value("train_steps", "7"),
    optional("train_step_size"),
    optional("sigma"),
    value("epochs", "10"),
    value("batch_size", "32"),
    value("learning_rate", "0.05"),
    value("momentum", "0.9"),
    value("train_flip", "true"),
    value("train_padcrop", "true"),
    value("pad", "4"),
    value("seed", "0"),
];

pub(crate) fn train_config(cfg: &Config) -> Result<TrainConfig> {
    Ok(TrainConfig {
        epochs: cfg.usize("epochs")?,
        batch_size: cfg.usize("batch_size")?,
        learning_rate: cfg.f64("learning_rate")?,
        momentum: cfg.f64("momentum")?,
        seed: cfg.u64("seed")?,
        train_flip: cfg.bool("train_flip")?,
        train_padcrop: cfg.bool("train_padcrop")?,
        pad: cfg.usize("pad")?,
        regime: regime(cfg)?,
    })
}

/// Fresh classifier for the dataset's shape, initialised from the run seed.
pub(crate) fn fit(data: &tte_core::data::Dataset, tc: &TrainConfig) -> Result<(Classifier, Vec<f64>)> {
    let [c, h, w] = data.image_dims();
    let mut model = Classifier::init(Architecture::new(c, h, w, data.classes), tc.seed)?;
    let history = train(&mut model, data, tc)?;
    Ok((model, history.epoch_loss))
}

pub fn run(cfg: &Config, run: &mut RunDir) -> Result<()> {
    let tc = train_config(cfg)?;
    tc.validate()?;
    let data = load_dataset(cfg, "dataset", run)?;
    let (model, losses) = fit(&data, &tc)?;
    let ckpt = run.path("model.ckpt");
    model.save(&ckpt)?;
    run.note("checkpoint_sha256", sha256_file(&ckpt)?);
    run.note("regime", &model.regime);
    run.note("arch", tte_core::model::ARCH_DESCRIPTOR);
    let mut report = String::from("epoch,loss\n");
    for (e, l) in losses.iter().enumerate() {
        let _ = writeln!(report, "{},{l:.12}", e + 1);
    }
    run.note("train_accuracy", format!("{:.6}", evaluate_clean(&model, &data)?));
    if cfg.has("test_dataset") {
        let test = load_dataset(cfg, "test_dataset", run)?;
        super::check_fit(&model, &test)?;
        run.note("test_accuracy", format!("{:.6}", evaluate_clean(&model, &test)?));
    }
    run.write("report.csv", &report)
}
