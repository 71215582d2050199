//! Randomized-smoothing certification: Monte-Carlo class counts under
//! Gaussian input noise, certified ℓ2 radii, ACR and certified-accuracy
//! curves.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::model::Model;
use crate::stats::{clopper_pearson_lower, normal_ppf};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothingConfig {
    pub sigma: f64,
    /// Samples used to pick the candidate class.
    pub n0: usize,
    /// Samples used to bound its probability.
    pub n: usize,
    pub alpha: f64,
    /// Noisy copies per forward pass.
    pub batch_size: usize,
    pub seed: u64,
}

impl SmoothingConfig {
    /// `n0 = 32`, `n = 1000`, `α = 0.001`.
    pub fn new(sigma: f64, seed: u64) -> Self {
        Self {
            sigma,
            n0: 32,
            n: 1000,
            alpha: 0.001,
            batch_size: 256,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(invalid(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.n0 == 0 || self.n == 0 || self.batch_size == 0 {
            return Err(invalid("n0, n and batch_size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CertificationResult {
    pub index: usize,
    pub label: usize,
    /// `None` when abstaining.
    pub prediction: Option<usize>,
    pub pa_lower: f64,
    pub radius: f64,
    pub correct: bool,
}

fn input_stream(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Predicted-class tallies over `n` draws of `x + N(0, σ²I)` (no clipping),
/// consuming noise from `rng`.
pub fn noisy_counts_with<M: Model + ?Sized>(
    model: &M,
    x: &Tensor,
    sigma: f64,
    n: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let mut shape = x.shape().to_vec();
    if shape.len() == 3 {
        shape.insert(0, 1);
    }
    if shape.len() != 4 || shape[0] != 1 {
        return Err(invalid(format!("noisy_counts needs a single image, got shape {:?}", x.shape())));
    }
    let d = x.len();
    let mut counts = vec![0usize; model.num_classes()];
    let mut done = 0;
    while done < n {
        let m = batch_size.max(1).min(n - done);
        let mut data = Vec::with_capacity(m * d);
        for _ in 0..m {
            data.extend(x.data().iter().map(|&v| {
                let z: f64 = StandardNormal.sample(rng);
                v + sigma * z
            }));
        }
        shape[0] = m;
        for c in model.predict(&Tensor::new(shape.clone(), data)?)? {
            counts[c] += 1;
        }
        done += m;
    }
    Ok(counts)
}

/// [`noisy_counts_with`] on stream 0 of `seed`, in batches of 256.
pub fn noisy_counts<M: Model + ?Sized>(model: &M, x: &Tensor, sigma: f64, n: usize, seed: u64) -> Result<Vec<usize>> {
    noisy_counts_with(model, x, sigma, n, 256, &mut input_stream(seed, 0))
}

fn top_class(counts: &[usize]) -> usize {
    let mut best = 0;
    for (c, &k) in counts.iter().enumerate() {
        if k > counts[best] {
            best = c;
        }
    }
    best
}

/// Guesses the top class from `n0` samples, bounds its probability from `n`
/// further samples and abstains unless the bound exceeds 1/2. `index` keys
/// the noise stream, so results do not depend on evaluation order.
pub fn certify<M: Model + ?Sized>(
    model: &M,
    x: &Tensor,
    label: usize,
    index: usize,
    cfg: &SmoothingConfig,
) -> Result<CertificationResult> {
    cfg.validate()?;
    let mut rng = input_stream(cfg.seed, index);
    let guess = top_class(&noisy_counts_with(model, x, cfg.sigma, cfg.n0, cfg.batch_size, &mut rng)?);
    let counts = noisy_counts_with(model, x, cfg.sigma, cfg.n, cfg.batch_size, &mut rng)?;
    let pa_lower = clopper_pearson_lower(counts[guess] as u64, cfg.n as u64, cfg.alpha)?;
    Ok(if pa_lower > 0.5 {
        CertificationResult {
            index,
            label,
            prediction: Some(guess),
            pa_lower,
            radius: cfg.sigma * normal_ppf(pa_lower),
            correct: guess == label,
        }
    } else {
        CertificationResult {
            index,
            label,
            prediction: None,
            pa_lower,
            radius: 0.0,
            correct: false,
        }
    })
}

/// [`certify`] on every instance, keyed by dataset position.
pub fn certify_dataset<M: Model + ?Sized>(model: &M, data: &Dataset, cfg: &SmoothingConfig) -> Result<Vec<CertificationResult>> {
    (0..data.len())
        .map(|i| certify(model, &data.images.instance(i), data.labels[i], i, cfg))
        .collect()
}

/// Average certified radius: mean of `R·1{correct}` over all results.
pub fn acr(results: &[CertificationResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(invalid("ACR of an empty result set"));
    }
    let total: f64 = results.iter().filter(|r| r.correct).map(|r| r.radius).sum();
    Ok(total / results.len() as f64)
}

/// Certified accuracy at each radius: fraction correct with `R ≥ r`.
pub fn certified_curve(results: &[CertificationResult], grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    if results.is_empty() {
        return Err(invalid("certified curve of an empty result set"));
    }
    if grid.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(invalid("radius grid must be sorted ascending"));
    }
    let n = results.len() as f64;
    Ok(grid
        .iter()
        .map(|&r| {
            let hits = results.iter().filter(|c| c.correct && c.radius >= r).count();
            (r, hits as f64 / n)
        })
        .collect())
}

/// Pointwise maximum of curves on one shared radius grid.
pub fn envelope(curves: &[Vec<(f64, f64)>]) -> Result<Vec<(f64, f64)>> {
    let first = curves.first().ok_or_else(|| invalid("envelope of no curves"))?;
    let mut out = first.clone();
    for curve in &curves[1..] {
        if curve.len() != out.len() || curve.iter().zip(&out).any(|(a, b)| a.0 != b.0) {
            return Err(invalid("curves do not share a radius grid"));
        }
        for (o, c) in out.iter_mut().zip(curve) {
            o.1 = o.1.max(c.1);
        }
    }
    Ok(out)
}

/// `index,label,prediction,pa_lower,radius,correct`; abstentions print `abstain`.
pub fn results_csv(results: &[CertificationResult]) -> String {
    let mut s = String::from("index,label,prediction,pa_lower,radius,correct\n");
    for r in results {
        let pred = r.prediction.map_or("abstain".to_string(), |p| p.to_string());
        let _ = writeln!(s, "{},{},{},{:.12},{:.12},{}", r.index, r.label, pred, r.pa_lower, r.radius, r.correct);
    }
    s
}

/// Evenly spaced radii `0, step, …` up to and including `max`.
pub fn radius_grid(max: f64, step: f64) -> Vec<f64> {
    let count = (max / step).round() as usize;
    (0..=count).map(|i| i as f64 * step).collect()
}
