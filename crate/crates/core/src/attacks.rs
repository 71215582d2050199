//! ℓ∞ attacks and worst-case robust accuracy.
//!
//! Every gradient attack is built on one ascent loop ([`pgd`] and [`apgd`]
//! differ only in momentum and step-halving), every attack draws its random
//! numbers from a per-instance stream keyed by the instance id, and every
//! outcome is checked against the ε-ball and pixel box before it is returned.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{rank_desc, Tape};
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Weight of the fresh step in the APGD update; `1 - alpha` weights the
/// previous displacement.
pub const APGD_ALPHA: f64 = 0.75;
/// A checkpoint halves the step unless more than this fraction of the
/// window's steps increased the loss.
pub const APGD_RHO: f64 = 0.75;
/// First checkpoint window, its per-checkpoint shrink and its floor, as
/// fractions of the step budget.
pub const APGD_WINDOW: (f64, f64, f64) = (0.22, 0.03, 0.06);
/// Initial square side as a fraction of the image area.
pub const SQUARE_P_INIT: f64 = 0.8;

/// Redraws allowed when a square candidate would not change the image.
const SQUARE_REDRAWS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackLoss {
    CrossEntropy,
    /// `-(z_y - z_t) / (z_π1 - z_π3)`, maximised over the top target classes.
    DlrTargeted,
}

/// Parameters shared by every attack. Unused fields are ignored by attacks
/// that have no use for them (FGSM ignores `steps`, square ignores
/// `step_size`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub restarts: usize,
    pub loss: AttackLoss,
    pub target_count: usize,
    pub seed: u64,
    pub random_start: bool,
    /// See [`APGD_ALPHA`]; `1.0` disables momentum.
    pub alpha: f64,
    pub halving: bool,
    /// Stop iterating on an instance once it is misclassified.
    pub early_stop: bool,
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        Self::pgd(epsilon, 1).with_step(epsilon).without_random_start()
    }

    /// Signed-gradient ascent with step ε/4 from a random start.
    pub fn pgd(epsilon: f64, steps: usize) -> Self {
        Self {
            epsilon,
            steps,
            step_size: epsilon / 4.0,
            restarts: 1,
            loss: AttackLoss::CrossEntropy,
            target_count: 1,
            seed: 0,
            random_start: true,
            alpha: 1.0,
            halving: false,
            early_stop: true,
        }
    }

    pub fn apgd_ce(epsilon: f64, steps: usize) -> Self {
        Self {
            step_size: 2.0 * epsilon,
            alpha: APGD_ALPHA,
            halving: true,
            ..Self::pgd(epsilon, steps)
        }
    }

    /// Targets the `min(N - 1, 9)` highest-scoring wrong classes.
    pub fn apgd_t(epsilon: f64, steps: usize, classes: usize) -> Self {
        Self {
            loss: AttackLoss::DlrTargeted,
            target_count: classes.saturating_sub(1).clamp(1, 9),
            ..Self::apgd_ce(epsilon, steps)
        }
    }

    /// Square search with a budget of `queries` score evaluations.
    pub fn square(epsilon: f64, queries: usize) -> Self {
        Self {
            steps: queries,
            ..Self::pgd(epsilon, 1)
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn with_step(self, step_size: f64) -> Self {
        Self { step_size, ..self }
    }

    pub fn with_restarts(self, restarts: usize) -> Self {
        Self { restarts, ..self }
    }

    pub fn without_random_start(self) -> Self {
        Self {
            random_start: false,
            ..self
        }
    }

    /// Plain projected ascent: no momentum, constant step.
    pub fn without_momentum_or_halving(self) -> Self {
        Self {
            alpha: 1.0,
            halving: false,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon <= 1.0) {
            return Err(invalid(format!("epsilon must lie in [0, 1], got {}", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(invalid("steps must be at least 1"));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(invalid(format!("step size must be non-negative, got {}", self.step_size)));
        }
        if self.restarts == 0 {
            return Err(invalid("restarts must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(invalid(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if self.loss == AttackLoss::DlrTargeted && self.target_count == 0 {
            return Err(invalid("target_count must be at least 1"));
        }
        Ok(())
    }
}

/// Images to attack, their labels and stable ids (the RNG stream of each
/// instance, so results do not depend on batch composition).
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
}

impl Batch {
    pub fn new(images: Tensor, labels: Vec<usize>, ids: Vec<u64>) -> Result<Self> {
        let [b, ..] = images.dims4()?;
        if labels.len() != b || ids.len() != b {
            return Err(invalid(format!(
                "batch of {b} images has {} labels and {} ids",
                labels.len(),
                ids.len()
            )));
        }
        Ok(Self { images, labels, ids })
    }

    /// Ids are dataset positions.
    pub fn from_dataset(ds: &Dataset) -> Self {
        Self {
            images: ds.images.clone(),
            labels: ds.labels.clone(),
            ids: (0..ds.len() as u64).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Batch {
        let parts: Vec<Tensor> = indices.iter().map(|&i| self.images.instance(i)).collect();
        let images = if parts.is_empty() {
            let mut shape = self.images.shape().to_vec();
            shape[0] = 0;
            Tensor::zeros(&shape)
        } else {
            Tensor::concat_batch(&parts).expect("instances share a shape")
        };
        Batch {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    fn instance_len(&self) -> usize {
        self.images.shape()[1..].iter().product()
    }
}

/// Per-instance attack results.
#[derive(Clone, Debug)]
pub struct AttackOutcome {
    pub adversarial: Tensor,
    /// Prediction on the adversarial image differs from the label.
    pub success: Vec<bool>,
    /// Model evaluations spent per instance.
    pub queries: Vec<usize>,
    /// `z_y - max_{j≠y} z_j` on the adversarial image (NaN if never queried).
    pub margin: Vec<f64>,
    /// Square attack only: the margin after each accepted candidate.
    pub margin_trace: Vec<Vec<f64>>,
}

impl AttackOutcome {
    /// Fraction of instances still classified correctly.
    pub fn accuracy(&self) -> f64 {
        if self.success.is_empty() {
            return 0.0;
        }
        self.success.iter().filter(|&&s| !s).count() as f64 / self.success.len() as f64
    }

    /// Checks the ε-ball and pixel-box constraints against the clean images.
    pub fn check_feasible(&self, clean: &Tensor, epsilon: f64) -> Result<()> {
        if self.adversarial.shape() != clean.shape() {
            return Err(Error::ShapeMismatch {
                op: "AttackOutcome::check_feasible",
                left: self.adversarial.shape().to_vec(),
                right: clean.shape().to_vec(),
            });
        }
        for (i, (a, c)) in self.adversarial.data().iter().zip(clean.data()).enumerate() {
            if !(0.0..=1.0).contains(a) || (a - c).abs() > epsilon + 1e-10 {
                return Err(Error::NonFinite(format!(
                    "adversarial pixel {i} = {a} violates the box or the {epsilon} ball around {c}"
                )));
            }
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn project(v: f64, clean: f64, eps: f64) -> f64 {
    v.max(clean - eps).min(clean + eps).clamp(0.0, 1.0)
}

/// `z_y - max_{j≠y} z_j`.
pub fn margin(row: &[f64], label: usize) -> f64 {
    let other = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    row[label] - other
}

fn predicted(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn instance_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Per-instance losses, their input gradient and the scores.
fn loss_and_grad<M: Model + ?Sized>(
    model: &M,
    x: Tensor,
    labels: &[usize],
    targets: Option<&[usize]>,
) -> Result<(Tensor, Vec<f64>, Tensor)> {
    let tape = Tape::new();
    let xv = tape.leaf(x);
    let scores = model.forward(&tape, xv)?;
    let each = match targets {
        None => tape.cross_entropy_each(scores, labels)?,
        Some(t) => tape.dlr_targeted_each(scores, labels, t)?.neg()?,
    };
    let grads = tape.backward(each.sum()?)?;
    let losses = each.value().data().to_vec();
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("attack loss".into()));
    }
    Ok((grads.wrt(xv), losses, (*scores.value()).clone()))
}

/// `clip(x + ε·sign(∇ₓ CE), 0, 1)`.
pub fn fgsm<M: Model + ?Sized>(model: &M, batch: &Batch, cfg: &AttackConfig) -> Result<AttackOutcome> {
    cfg.validate()?;
    let (grad, _, _) = loss_and_grad(model, batch.images.clone(), &batch.labels, None)?;
    let eps = cfg.epsilon;
    let data = batch
        .images
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&x, &g)| (x + eps * sign(g)).clamp(0.0, 1.0))
        .collect();
    let adversarial = Tensor::new(batch.images.shape().to_vec(), data)?;
    let scores = model.scores(&adversarial)?;
    finish(batch, adversarial, &scores, vec![2; batch.len()], cfg.epsilon)
}

fn finish(
    batch: &Batch,
    adversarial: Tensor,
    scores: &Tensor,
    queries: Vec<usize>,
    epsilon: f64,
) -> Result<AttackOutcome> {
    let n = scores.shape().get(1).copied().unwrap_or(0);
    let mut success = Vec::with_capacity(batch.len());
    let mut margins = Vec::with_capacity(batch.len());
    for (row, &y) in scores.data().chunks(n.max(1)).zip(&batch.labels) {
        success.push(predicted(row) != y);
        margins.push(margin(row, y));
    }
    let out = AttackOutcome {
        adversarial,
        success,
        queries,
        margin: margins,
        margin_trace: Vec::new(),
    };
    out.check_feasible(&batch.images, epsilon)?;
    Ok(out)
}

/// Where one instance's ascent stands.
struct Walker {
    slot: usize,
    x: Vec<f64>,
    prev: Vec<f64>,
    grad: Vec<f64>,
    best_x: Vec<f64>,
    best_grad: Vec<f64>,
    best_loss: f64,
    step: f64,
    reduced_last: bool,
    best_at_checkpoint: f64,
    losses: Vec<f64>,
}

/// The selected iterate of one instance.
#[derive(Clone)]
struct Pick {
    x: Vec<f64>,
    fooled: bool,
    loss: f64,
    margin: f64,
}

impl Pick {
    fn beats(&self, fooled: bool, loss: f64) -> bool {
        (fooled, loss) > (self.fooled, self.loss)
    }
}

/// One ascent from `start` on every instance of `batch`. Returns the chosen
/// iterate of each instance (the start itself is never chosen) and the
/// evaluations spent.
fn ascend<M: Model + ?Sized>(
    model: &M,
    batch: &Batch,
    start: Vec<Vec<f64>>,
    targets: Option<&[usize]>,
    cfg: &AttackConfig,
) -> Result<(Vec<Pick>, Vec<usize>)> {
    let b = batch.len();
    let d = batch.instance_len();
    let mut shape = batch.images.shape().to_vec();
    let clean = batch.images.data();
    let eps = cfg.epsilon;
    let mut picks: Vec<Option<Pick>> = vec![None; b];
    let mut evals = vec![0usize; b];

    let stack = |walkers: &[Walker], shape: &mut Vec<usize>| {
        shape[0] = walkers.len();
        let mut data = Vec::with_capacity(walkers.len() * d);
        for w in walkers {
            data.extend_from_slice(&w.x);
        }
        Tensor::new(shape.clone(), data)
    };
    let select = |walkers: &[Walker], f: &dyn Fn(usize) -> usize| -> Vec<usize> {
        walkers.iter().map(|w| f(w.slot)).collect()
    };

    let mut walkers: Vec<Walker> = start
        .into_iter()
        .enumerate()
        .map(|(slot, x)| Walker {
            slot,
            prev: x.clone(),
            best_x: x.clone(),
            x,
            grad: Vec::new(),
            best_grad: Vec::new(),
            best_loss: f64::NEG_INFINITY,
            step: cfg.step_size,
            reduced_last: true,
            best_at_checkpoint: f64::NEG_INFINITY,
            losses: Vec::new(),
        })
        .collect();

    let labels = select(&walkers, &|s| batch.labels[s]);
    let tgts = targets.map(|t| select(&walkers, &|s| t[s]));
    let (g, l, _) = loss_and_grad(model, stack(&walkers, &mut shape)?, &labels, tgts.as_deref())?;
    for (i, w) in walkers.iter_mut().enumerate() {
        w.grad = g.data()[i * d..(i + 1) * d].to_vec();
        w.best_grad = w.grad.clone();
        w.best_loss = l[i];
        w.best_at_checkpoint = l[i];
        w.losses.push(l[i]);
        evals[w.slot] += 1;
    }

    let n = cfg.steps;
    let (w0, shrink, floor) = APGD_WINDOW;
    let mut window = ((w0 * n as f64).ceil() as usize).max(1);
    let shrink = (shrink * n as f64).ceil() as usize;
    let floor = ((floor * n as f64).ceil() as usize).max(1);
    let mut since_check = 0;

    for i in 0..n {
        if walkers.is_empty() {
            break;
        }
        let a = if i == 0 { 1.0 } else { cfg.alpha };
        for w in walkers.iter_mut() {
            let x0 = &clean[w.slot * d..(w.slot + 1) * d];
            let mut next = Vec::with_capacity(d);
            for p in 0..d {
                let xv = w.x[p];
                let z = project(xv + w.step * sign(w.grad[p]), x0[p], eps);
                next.push(if a == 1.0 {
                    z
                } else {
                    project(xv + (z - xv) * a + (xv - w.prev[p]) * (1.0 - a), x0[p], eps)
                });
            }
            w.prev = std::mem::replace(&mut w.x, next);
        }

        let labels = select(&walkers, &|s| batch.labels[s]);
        let tgts = targets.map(|t| select(&walkers, &|s| t[s]));
        let (g, l, scores) =
            loss_and_grad(model, stack(&walkers, &mut shape)?, &labels, tgts.as_deref())?;
        let classes = scores.shape()[1];
        for (j, w) in walkers.iter_mut().enumerate() {
            evals[w.slot] += 1;
            w.grad.copy_from_slice(&g.data()[j * d..(j + 1) * d]);
            let row = &scores.data()[j * classes..(j + 1) * classes];
            let y = batch.labels[w.slot];
            let fooled = predicted(row) != y;
            let better = picks[w.slot].as_ref().is_none_or(|p| p.beats(fooled, l[j]));
            if better {
                picks[w.slot] = Some(Pick {
                    x: w.x.clone(),
                    fooled,
                    loss: l[j],
                    margin: margin(row, y),
                });
            }
            if l[j] > w.best_loss {
                w.best_loss = l[j];
                w.best_x.clone_from(&w.x);
                w.best_grad.clone_from(&w.grad);
            }
            w.losses.push(l[j]);
        }

        if cfg.halving {
            since_check += 1;
            if since_check == window {
                for w in walkers.iter_mut() {
                    let h = &w.losses;
                    let last = h.len() - 1;
                    let increases = (0..window).filter(|&c| h[last - c] > h[last - c - 1]).count();
                    let oscillating = increases as f64 <= window as f64 * APGD_RHO;
                    let stalled = !w.reduced_last && w.best_at_checkpoint >= w.best_loss;
                    let halve = oscillating || stalled;
                    w.reduced_last = halve;
                    w.best_at_checkpoint = w.best_loss;
                    if halve {
                        w.step /= 2.0;
                        w.x.clone_from(&w.best_x);
                        w.grad.clone_from(&w.best_grad);
                    }
                }
                window = window.saturating_sub(shrink).max(floor);
                since_check = 0;
            }
        }

        if cfg.early_stop {
            walkers.retain(|w| !picks[w.slot].as_ref().is_some_and(|p| p.fooled));
        }
    }
    let picks = picks
        .into_iter()
        .map(|p| p.expect("at least one step was taken"))
        .collect();
    Ok((picks, evals))
}

/// Uniform start inside the ε-ball (or the clean image), clipped to the box.
fn starting_points(batch: &Batch, idx: &[usize], rngs: &mut [ChaCha8Rng], cfg: &AttackConfig) -> Vec<Vec<f64>> {
    let d = batch.instance_len();
    let eps = cfg.epsilon;
    idx.iter()
        .map(|&i| {
            let x0 = &batch.images.data()[i * d..(i + 1) * d];
            if !cfg.random_start {
                return x0.to_vec();
            }
            let rng = &mut rngs[i];
            x0.iter()
                .map(|&v| (v + eps * rng.random_range(-1.0..=1.0)).clamp(0.0, 1.0))
                .collect()
        })
        .collect()
}

/// Restarts (and, for the targeted loss, targets) on the instances not yet
/// fooled, keeping per instance the result that is fooled, or else has the
/// lowest margin.
fn multi_run<M: Model + ?Sized>(model: &M, batch: &Batch, cfg: &AttackConfig) -> Result<AttackOutcome> {
    cfg.validate()?;
    let b = batch.len();
    let d = batch.instance_len();
    let mut rngs: Vec<ChaCha8Rng> = batch.ids.iter().map(|&id| instance_rng(cfg.seed, id)).collect();
    let mut best: Vec<Option<Pick>> = vec![None; b];
    let mut queries = vec![0usize; b];

    let target_lists: Option<Vec<Vec<usize>>> = match cfg.loss {
        AttackLoss::CrossEntropy => None,
        AttackLoss::DlrTargeted => {
            let scores = model.scores(&batch.images)?;
            let n = scores.shape()[1];
            if n < 4 {
                return Err(invalid(format!("targeted DLR needs at least 4 classes, got {n}")));
            }
            queries.iter_mut().for_each(|q| *q += 1);
            Some(
                scores
                    .data()
                    .chunks(n)
                    .zip(&batch.labels)
                    .map(|(row, &y)| {
                        rank_desc(row)
                            .into_iter()
                            .filter(|&c| c != y)
                            .take(cfg.target_count.min(n - 1))
                            .collect()
                    })
                    .collect(),
            )
        }
    };
    let rounds = target_lists.as_ref().map_or(1, |_| cfg.target_count);

    for round in 0..rounds {
        for _ in 0..cfg.restarts {
            let idx: Vec<usize> = (0..b)
                .filter(|&i| !best[i].as_ref().is_some_and(|p| p.fooled))
                .filter(|&i| target_lists.as_ref().is_none_or(|t| round < t[i].len()))
                .collect();
            if idx.is_empty() {
                break;
            }
            let sub = batch.subset(&idx);
            let targets: Option<Vec<usize>> = target_lists
                .as_ref()
                .map(|t| idx.iter().map(|&i| t[i][round]).collect());
            let start = starting_points(batch, &idx, &mut rngs, cfg);
            let (picks, evals) = ascend(model, &sub, start, targets.as_deref(), cfg)?;
            for ((&i, pick), e) in idx.iter().zip(picks).zip(evals) {
                queries[i] += e;
                let replace = best[i]
                    .as_ref()
                    .is_none_or(|cur| (pick.fooled, -pick.margin) > (cur.fooled, -cur.margin));
                if replace {
                    best[i] = Some(pick);
                }
            }
        }
    }

    let mut data = Vec::with_capacity(b * d);
    let mut success = Vec::with_capacity(b);
    let mut margins = Vec::with_capacity(b);
    for p in best {
        let p = p.expect("every instance ran at least once");
        data.extend_from_slice(&p.x);
        success.push(p.fooled);
        margins.push(p.margin);
    }
    let out = AttackOutcome {
        adversarial: Tensor::new(batch.images.shape().to_vec(), data)?,
        success,
        queries,
        margin: margins,
        margin_trace: Vec::new(),
    };
    out.check_feasible(&batch.images, cfg.epsilon)?;
    Ok(out)
}

/// Projected signed-gradient ascent on the cross entropy.
pub fn pgd<M: Model + ?Sized>(model: &M, batch: &Batch, cfg: &AttackConfig) -> Result<AttackOutcome> {
    let cfg = AttackConfig {
        loss: AttackLoss::CrossEntropy,
        alpha: 1.0,
        halving: false,
        ..*cfg
    };
    multi_run(model, batch, &cfg)
}

/// PGD with momentum and checkpointed step halving, on the cross entropy or
/// the targeted DLR loss.
pub fn apgd<M: Model + ?Sized>(model: &M, batch: &Batch, cfg: &AttackConfig) -> Result<AttackOutcome> {
    multi_run(model, batch, cfg)
}

/// Square side fraction after `it` of `budget` iterations, on the reference
/// 10 000-iteration schedule.
fn square_fraction(it: usize, budget: usize) -> f64 {
    let it = (it as f64 / budget.max(1) as f64 * 10_000.0) as usize;
    let halvings = match it {
        0..=10 => 0,
        11..=50 => 1,
        51..=200 => 2,
        201..=500 => 3,
        501..=1000 => 4,
        1001..=2000 => 5,
        2001..=4000 => 6,
        4001..=6000 => 7,
        6001..=8000 => 8,
        _ => 9,
    };
    SQUARE_P_INIT / f64::powi(2.0, halvings)
}

/// A score oracle: the only access the square attack has to a model.
pub type ScoreOracle<'a> = dyn Fn(&Tensor) -> Result<Tensor> + 'a;

/// Score-only random search: ε-magnitude square patches of shrinking side,
/// a candidate is kept iff it strictly lowers the margin. `cfg.steps` is the
/// per-instance query budget, including the query on the clean image.
pub fn square_attack(oracle: &ScoreOracle<'_>, batch: &Batch, cfg: &AttackConfig) -> Result<AttackOutcome> {
    if !(cfg.epsilon >= 0.0 && cfg.epsilon <= 1.0) {
        return Err(invalid(format!("epsilon must lie in [0, 1], got {}", cfg.epsilon)));
    }
    let b = batch.len();
    let [_, c, h, w] = batch.images.dims4()?;
    let d = c * h * w;
    let eps = cfg.epsilon;
    let budget = cfg.steps;
    let clean = batch.images.data();
    let mut x: Vec<Vec<f64>> = (0..b).map(|i| clean[i * d..(i + 1) * d].to_vec()).collect();
    let mut queries = vec![0usize; b];
    let mut margins = vec![f64::NAN; b];
    let mut fooled = vec![false; b];
    let mut trace = vec![Vec::new(); b];
    if budget == 0 || b == 0 {
        return Ok(AttackOutcome {
            adversarial: batch.images.clone(),
            success: fooled,
            queries,
            margin: margins,
            margin_trace: trace,
        });
    }
    let mut rngs: Vec<ChaCha8Rng> = batch.ids.iter().map(|&id| instance_rng(cfg.seed, id)).collect();
    let mut shape = batch.images.shape().to_vec();

    let mut query = |cands: &[(usize, Vec<f64>)], queries: &mut [usize]| -> Result<Vec<(f64, bool)>> {
        shape[0] = cands.len();
        let data: Vec<f64> = cands.iter().flat_map(|(_, v)| v.iter().copied()).collect();
        let scores = oracle(&Tensor::new(shape.clone(), data)?)?;
        let n = scores.shape()[1];
        Ok(cands
            .iter()
            .zip(scores.data().chunks(n))
            .map(|((i, _), row)| {
                queries[*i] += 1;
                let y = batch.labels[*i];
                (margin(row, y), predicted(row) != y)
            })
            .collect())
    };

    let all: Vec<(usize, Vec<f64>)> = (0..b).map(|i| (i, x[i].clone())).collect();
    for ((i, _), (m, f)) in all.iter().zip(query(&all, &mut queries)?) {
        margins[*i] = m;
        fooled[*i] = f;
        trace[*i].push(m);
    }

    let mut it = 0;
    loop {
        let active: Vec<usize> = (0..b).filter(|&i| !fooled[i] && queries[i] < budget).collect();
        if active.is_empty() {
            break;
        }
        let cands: Vec<(usize, Vec<f64>)> = active
            .iter()
            .map(|&i| {
                let x0 = &clean[i * d..(i + 1) * d];
                let rng = &mut rngs[i];
                let cand = if it == 0 {
                    // vertical stripes: one ±ε value per channel and column
                    let mut v = x0.to_vec();
                    for ch in 0..c {
                        for col in 0..w {
                            let delta = if rng.random_bool(0.5) { eps } else { -eps };
                            for row in 0..h {
                                let p = (ch * h + row) * w + col;
                                v[p] = (x0[p] + delta).clamp(0.0, 1.0);
                            }
                        }
                    }
                    v
                } else {
                    let p = square_fraction(it - 1, budget);
                    let side = ((p * (h * w) as f64).sqrt().round() as usize).clamp(1, h.min(w).saturating_sub(1).max(1));
                    let mut v = x[i].clone();
                    for _ in 0..SQUARE_REDRAWS {
                        let r0 = rng.random_range(0..=h - side);
                        let c0 = rng.random_range(0..=w - side);
                        let mut changed = false;
                        v.clone_from(&x[i]);
                        for ch in 0..c {
                            let delta = if rng.random_bool(0.5) { eps } else { -eps };
                            for row in r0..r0 + side {
                                for col in c0..c0 + side {
                                    let q = (ch * h + row) * w + col;
                                    let nv = (x0[q] + delta).clamp(0.0, 1.0);
                                    changed |= nv != v[q];
                                    v[q] = nv;
                                }
                            }
                        }
                        if changed {
                            break;
                        }
                    }
                    v
                };
                (i, cand)
            })
            .collect();
        let results = query(&cands, &mut queries)?;
        for ((i, cand), (m, f)) in cands.into_iter().zip(results) {
            if m < margins[i] {
                margins[i] = m;
                fooled[i] = f;
                x[i] = cand;
                trace[i].push(m);
            }
        }
        it += 1;
    }

    let out = AttackOutcome {
        adversarial: Tensor::new(batch.images.shape().to_vec(), x.concat())?,
        success: fooled,
        queries,
        margin: margins,
        margin_trace: trace,
    };
    out.check_feasible(&batch.images, eps)?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackKind {
    Fgsm,
    Pgd,
    Apgd,
    Square,
}

/// One named attack of a suite.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub kind: AttackKind,
    pub config: AttackConfig,
}

impl SuiteEntry {
    pub fn new(name: &str, kind: AttackKind, config: AttackConfig) -> Self {
        Self {
            name: name.to_string(),
            kind,
            config,
        }
    }

    pub fn run<M: Model + ?Sized>(&self, model: &M, batch: &Batch) -> Result<AttackOutcome> {
        match self.kind {
            AttackKind::Fgsm => fgsm(model, batch, &self.config),
            AttackKind::Pgd => pgd(model, batch, &self.config),
            AttackKind::Apgd => apgd(model, batch, &self.config),
            AttackKind::Square => square_attack(&|x: &Tensor| model.scores(x), batch, &self.config),
        }
    }

    /// `name{key=value,...}` for manifests.
    pub fn describe(&self) -> String {
        let c = &self.config;
        format!(
            "{}{{kind={:?},epsilon={},steps={},step_size={},restarts={},loss={:?},targets={},seed={},random_start={},alpha={},halving={}}}",
            self.name, self.kind, c.epsilon, c.steps, c.step_size, c.restarts, c.loss, c.target_count, c.seed, c.random_start, c.alpha, c.halving
        )
    }
}

/// APGD-CE, APGD-T and Square: the suite behind every "Robust" column.
pub fn standard_suite(epsilon: f64, steps: usize, square_queries: usize, classes: usize, seed: u64) -> Vec<SuiteEntry> {
    vec![
        SuiteEntry::new("APGD-CE", AttackKind::Apgd, AttackConfig::apgd_ce(epsilon, steps).with_seed(seed)),
        SuiteEntry::new(
            "APGD-T",
            AttackKind::Apgd,
            AttackConfig::apgd_t(epsilon, steps, classes).with_seed(seed),
        ),
        SuiteEntry::new("Square", AttackKind::Square, AttackConfig::square(epsilon, square_queries).with_seed(seed)),
    ]
}

/// Clean, per-attack and worst-case accuracies over one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct RobustReport {
    pub instances: usize,
    pub clean: f64,
    pub attacks: Vec<(String, f64)>,
    pub robust: f64,
    /// Per instance: clean-correct and not fooled by any attack.
    pub robust_mask: Vec<bool>,
}

impl RobustReport {
    pub fn attack(&self, name: &str) -> Option<f64> {
        self.attacks.iter().find(|(n, _)| n == name).map(|&(_, a)| a)
    }

    /// `metric,accuracy` rows in percent: clean, each attack, robust.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,accuracy\n");
        let _ = writeln!(s, "Clean,{:.2}", 100.0 * self.clean);
        for (name, acc) in &self.attacks {
            let _ = writeln!(s, "{name},{:.2}", 100.0 * acc);
        }
        let _ = writeln!(s, "Robust,{:.2}", 100.0 * self.robust);
        s
    }
}

/// An instance is robust iff it is classified correctly and every attack in
/// the suite fails on it. Attacks only run on clean-correct instances.
pub fn robust_accuracy<M: Model + ?Sized>(model: &M, batch: &Batch, suite: &[SuiteEntry]) -> Result<RobustReport> {
    if suite.is_empty() {
        return Err(invalid("attack suite is empty"));
    }
    if batch.is_empty() {
        return Err(invalid("cannot evaluate an empty batch"));
    }
    let n = batch.len() as f64;
    let preds = model.predict(&batch.images)?;
    let correct: Vec<usize> = (0..batch.len()).filter(|&i| preds[i] == batch.labels[i]).collect();
    let sub = batch.subset(&correct);
    let mut robust_mask = vec![false; batch.len()];
    correct.iter().for_each(|&i| robust_mask[i] = true);
    let mut attacks = Vec::with_capacity(suite.len());
    for entry in suite {
        let held = if sub.is_empty() {
            0
        } else {
            let out = entry.run(model, &sub)?;
            for (&i, &s) in correct.iter().zip(&out.success) {
                if s {
                    robust_mask[i] = false;
                }
            }
            out.success.iter().filter(|&&s| !s).count()
        };
        attacks.push((entry.name.clone(), held as f64 / n));
    }
    let robust = robust_mask.iter().filter(|&&r| r).count() as f64 / n;
    let report = RobustReport {
        instances: batch.len(),
        clean: correct.len() as f64 / n,
        attacks,
        robust,
        robust_mask,
    };
    debug_assert!(report.attacks.iter().all(|&(_, a)| report.robust <= a));
    Ok(report)
}

/// APGD-CE accuracy against the iteration count (at a fixed ε) and against ε
/// (at a fixed iteration count).
#[derive(Clone, Debug, PartialEq)]
pub struct ObfuscationTable {
    pub by_iterations: Vec<(usize, f64)>,
    pub by_epsilon: Vec<(f64, f64)>,
}

/// Grid points and the fixed coordinate of each sub-table.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub iterations: Vec<usize>,
    pub epsilons: Vec<f64>,
    pub fixed_epsilon: f64,
    pub fixed_iterations: usize,
    pub seed: u64,
}

impl SweepConfig {
    /// Iterations {5, 10, 50, 100} at ε = 8/255; ε ∈ {8, 16, 32, 64}/255 at
    /// 100 iterations.
    pub fn standard(seed: u64) -> Self {
        Self {
            iterations: vec![5, 10, 50, 100],
            epsilons: [8.0, 16.0, 32.0, 64.0].iter().map(|e| e / 255.0).collect(),
            fixed_epsilon: 8.0 / 255.0,
            fixed_iterations: 100,
            seed,
        }
    }
}

pub fn obfuscation_sweep<M: Model + ?Sized>(model: &M, batch: &Batch, cfg: &SweepConfig) -> Result<ObfuscationTable> {
    if cfg.iterations.is_empty() || cfg.epsilons.is_empty() {
        return Err(invalid("obfuscation grids must be non-empty"));
    }
    let acc = |eps: f64, steps: usize| -> Result<f64> {
        let entry = SuiteEntry::new("APGD-CE", AttackKind::Apgd, AttackConfig::apgd_ce(eps, steps).with_seed(cfg.seed));
        Ok(robust_accuracy(model, batch, &[entry])?.robust)
    };
    let by_iterations = cfg
        .iterations
        .iter()
        .map(|&s| Ok((s, acc(cfg.fixed_epsilon, s)?)))
        .collect::<Result<_>>()?;
    let by_epsilon = cfg
        .epsilons
        .iter()
        .map(|&e| Ok((e, acc(e, cfg.fixed_iterations)?)))
        .collect::<Result<_>>()?;
    Ok(ObfuscationTable {
        by_iterations,
        by_epsilon,
    })
}
