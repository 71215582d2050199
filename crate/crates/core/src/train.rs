//! Mini-batch SGD with momentum under four regimes: nominal, adversarial
//! (PGD inner maximisation), Gaussian augmentation and a SmoothAdv-style mix.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attacks::{pgd, AttackConfig, Batch};
use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::model::{predict_batched, Classifier, Model};
use crate::tensor::Tensor;
use crate::transforms::{TransformSpec, DEFAULT_PAD};

// independent RNG streams of one training run
const STREAM_ORDER: u64 = 0;
const STREAM_AUGMENT: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_ATTACK: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Regime {
    Nominal,
    Adversarial { epsilon: f64, steps: usize, step_size: f64 },
    Gaussian { sigma: f64 },
    SmoothAdv { sigma: f64, epsilon: f64, steps: usize },
}

impl Regime {
    /// PGD inner loop with the default ε/4 step.
    pub fn adversarial(epsilon: f64, steps: usize) -> Self {
        Regime::Adversarial {
            epsilon,
            steps,
            step_size: epsilon / 4.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(format!("{name} must be positive, got {v}")))
            }
        };
        match *self {
            Regime::Nominal => Ok(()),
            Regime::Adversarial { epsilon, steps, step_size } => {
                positive("epsilon", epsilon)?;
                positive("step_size", step_size)?;
                if steps == 0 {
                    return Err(invalid("adversarial steps must be at least 1"));
                }
                Ok(())
            }
            Regime::Gaussian { sigma } => positive("sigma", sigma),
            Regime::SmoothAdv { sigma, epsilon, steps } => {
                positive("sigma", sigma)?;
                positive("epsilon", epsilon)?;
                if steps == 0 {
                    return Err(invalid("smoothadv steps must be at least 1"));
                }
                Ok(())
            }
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Regime::Nominal => write!(f, "nominal"),
            Regime::Adversarial { epsilon, steps, step_size } => {
                write!(f, "adversarial(epsilon={epsilon},steps={steps},step_size={step_size})")
            }
            Regime::Gaussian { sigma } => write!(f, "gaussian(sigma={sigma})"),
            Regime::SmoothAdv { sigma, epsilon, steps } => {
                write!(f, "smoothadv(sigma={sigma},epsilon={epsilon},steps={steps})")
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub train_flip: bool,
    pub train_padcrop: bool,
    pub pad: usize,
    pub regime: Regime,
}

impl TrainConfig {
    /// Desk defaults: 10 epochs of batch 32 at lr 0.05, momentum 0.9, both
    /// augmentations on.
    pub fn new(regime: Regime, seed: u64) -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            seed,
            train_flip: true,
            train_padcrop: true,
            pad: DEFAULT_PAD,
            regime,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid("epochs and batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        self.regime.validate()
    }
}

/// Mean training loss of every epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epoch_loss: Vec<f64>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Random flip (p = 0.5) and random pad-and-crop per instance.
fn augment(x: &Tensor, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if !cfg.train_flip && !cfg.train_padcrop {
        return Ok(x.clone());
    }
    let parts = (0..x.shape()[0])
        .map(|i| {
            let mut xi = x.instance(i);
            if cfg.train_padcrop {
                let span = 2 * cfg.pad;
                let (ox, oy) = (rng.random_range(0..=span), rng.random_range(0..=span));
                xi = TransformSpec::pad_crop(ox, oy, cfg.pad)?.apply_tensor(&xi)?;
            }
            if cfg.train_flip && rng.random_bool(0.5) {
                xi = TransformSpec::Flip.apply_tensor(&xi)?;
            }
            Ok(xi)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_batch(&parts)
}

fn add_noise(x: &mut Tensor, sigma: f64, rng: &mut ChaCha8Rng) {
    for v in x.data_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v += sigma * z;
    }
}

/// Trains `model` in place. Seed-deterministic: data order, augmentation,
/// noise and attack starts each come from their own stream of `cfg.seed`.
pub fn train(model: &mut Classifier, data: &Dataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let [c, h, w] = data.image_dims();
    let a = model.arch;
    if [c, h, w] != [a.channels, a.height, a.width] || data.classes != a.classes {
        return Err(invalid(format!(
            "dataset {c}x{h}x{w} with {} classes does not fit the model {}x{}x{} with {} classes",
            data.classes, a.channels, a.height, a.width, a.classes
        )));
    }
    let mut order_rng = stream(cfg.seed, STREAM_ORDER);
    let mut aug_rng = stream(cfg.seed, STREAM_AUGMENT);
    let mut noise_rng = stream(cfg.seed, STREAM_NOISE);
    let mut velocity: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step_id: u64 = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (images, labels) = data.gather(chunk);
            let mut x = augment(&images, cfg, &mut aug_rng)?;
            let attack = |eps: f64, steps: usize, step_size: f64, x: Tensor, model: &Classifier| -> Result<Tensor> {
                let ids = (0..labels.len() as u64).map(|i| (step_id << 16) | i).collect();
                let batch = Batch::new(x, labels.clone(), ids)?;
                let acfg = AttackConfig {
                    early_stop: false,
                    ..AttackConfig::pgd(eps, steps)
                        .with_step(step_size)
                        .with_seed(cfg.seed ^ (STREAM_ATTACK << 56))
                };
                Ok(pgd(model, &batch, &acfg)?.adversarial)
            };
            match cfg.regime {
                Regime::Nominal => {}
                Regime::Adversarial { epsilon, steps, step_size } => {
                    x = attack(epsilon, steps, step_size, x, model)?;
                }
                Regime::Gaussian { sigma } => add_noise(&mut x, sigma, &mut noise_rng),
                Regime::SmoothAdv { sigma, epsilon, steps } => {
                    x = attack(epsilon, steps, epsilon / 4.0, x, model)?;
                    add_noise(&mut x, sigma, &mut noise_rng);
                }
            }
            step_id += 1;

            let tape = Tape::new();
            let params = model.param_leaves(&tape);
            let scores = model.forward_with(&tape, tape.leaf(x), &params)?;
            let loss = tape.softmax_cross_entropy(scores, &labels)?;
            let value = loss.value().item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss {value} at epoch {epoch}, batch {batches} (lr {})",
                    cfg.learning_rate
                )));
            }
            let grads = tape.backward(loss)?;
            for ((p, v), leaf) in model.params_mut().iter_mut().zip(&mut velocity).zip(&params) {
                let g = grads.wrt(*leaf);
                for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                    *vi = cfg.momentum * *vi + gi;
                    *pi -= cfg.learning_rate * *vi;
                }
            }
            total += value;
            batches += 1;
        }
        history.epoch_loss.push(total / batches as f64);
    }
    model.regime = cfg.regime.to_string();
    Ok(history)
}

/// Fraction of argmax-correct predictions.
pub fn evaluate_clean<M: Model + ?Sized>(model: &M, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(invalid("cannot evaluate an empty dataset"));
    }
    let preds = predict_batched(model, &data.images, 256)?;
    let hits = preds.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthConfig};
    use crate::model::Architecture;

    fn tiny() -> (Classifier, Dataset) {
        let ds = generate(&SynthConfig::new(64, 4, 16, 16), 1).unwrap();
        (Classifier::init(Architecture::new(1, 16, 16, 4), 2).unwrap(), ds)
    }

    #[test]
    fn training_is_seed_deterministic() {
        let (m0, ds) = tiny();
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::new(Regime::Gaussian { sigma: 0.1 }, 4)
        };
        let (mut a, mut b) = (m0.clone(), m0);
        let ha = train(&mut a, &ds, &cfg).unwrap();
        let hb = train(&mut b, &ds, &cfg).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(a.regime, "gaussian(sigma=0.1)");
    }

    #[test]
    fn rejects_bad_configs() {
        let (mut m, ds) = tiny();
        let mut cfg = TrainConfig::new(Regime::Gaussian { sigma: 0.0 }, 0);
        assert!(train(&mut m, &ds, &cfg).is_err());
        cfg.regime = Regime::Nominal;
        cfg.learning_rate = -1.0;
        assert!(train(&mut m, &ds, &cfg).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let (mut m, ds) = tiny();
        let cfg = TrainConfig {
            learning_rate: 1e200,
            epochs: 3,
            ..TrainConfig::new(Regime::Nominal, 0)
        };
        match train(&mut m, &ds, &cfg) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("epoch")),
            other => panic!("expected a non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn constant_dataset_and_matching_classifier() {
        use crate::model::Linear;
        let ds = Dataset::new(Tensor::zeros(&[5, 1, 16, 16]), vec![2; 5], 3).unwrap();
        let m = Linear::new(Tensor::zeros(&[256, 3]), Tensor::new(vec![3], vec![0.0, 0.0, 1.0]).unwrap()).unwrap();
        assert_eq!(evaluate_clean(&m, &ds).unwrap(), 1.0);
    }
}
