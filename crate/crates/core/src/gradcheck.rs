//! Finite-difference gradient checking and seeded random computation graphs
//! that exercise every tape primitive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::ensemble::EnsembleModel;
use crate::error::{invalid, Result};
use crate::model::{Architecture, Classifier, Model};
use crate::tensor::Tensor;
use crate::transforms::TransformSpec;

/// Central differences `(f(x + h·e_i) − f(x − h·e_i)) / 2h`.
pub fn numeric_gradient(f: &dyn Fn(&Tensor) -> Result<f64>, x: &Tensor, h: f64) -> Result<Tensor> {
    let mut g = Tensor::zeros(x.shape());
    let mut p = x.clone();
    for i in 0..x.len() {
        let v = x.data()[i];
        p.data_mut()[i] = v + h;
        let up = f(&p)?;
        p.data_mut()[i] = v - h;
        let down = f(&p)?;
        p.data_mut()[i] = v;
        g.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(g)
}

/// `max|a − b| / max(max|a|, max|b|)`, with the denominator floored at 1e-8.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let scale = a.data().iter().chain(b.data()).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    a.max_abs_diff(b) / scale
}

/// A scalar function of several leaves recorded on a tape.
pub trait Graph {
    fn inputs(&self) -> &[Tensor];
    fn build<'t>(&self, tape: &'t Tape, leaves: &[Var<'t>]) -> Result<Var<'t>>;
}

fn evaluate<G: Graph + ?Sized>(g: &G, inputs: &[Tensor]) -> Result<f64> {
    let tape = Tape::new();
    let leaves: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = g.build(&tape, &leaves)?;
    if !out.value().is_scalar() {
        return Err(invalid(format!("graph output must be scalar, got {:?}", out.shape())));
    }
    Ok(out.value().item())
}

/// Relative error of the backward pass against central differences (step
/// `h`), one entry per input.
pub fn check_gradients<G: Graph + ?Sized>(g: &G, h: f64) -> Result<Vec<f64>> {
    let inputs = g.inputs();
    let tape = Tape::new();
    let leaves: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = g.build(&tape, &leaves)?;
    let grads = tape.backward(out)?;
    let mut errs = Vec::with_capacity(inputs.len());
    for (j, leaf) in leaves.iter().enumerate() {
        let f = |x: &Tensor| {
            let mut probe = inputs.to_vec();
            probe[j] = x.clone();
            evaluate(g, &probe)
        };
        let numeric = numeric_gradient(&f, &inputs[j], h)?;
        errs.push(relative_error(&grads.wrt(*leaf), &numeric));
    }
    Ok(errs)
}

#[derive(Clone, Debug)]
enum Step {
    Relu,
    Neg,
    /// `exp(x / 2)`.
    Exp,
    /// `ln(x² + 1)`.
    LogSquare,
    /// `x · sign(x)`.
    Abs,
    Scale(f64),
    Add(usize),
    Sub(usize),
    Mul(usize),
    Conv(usize),
    ChannelBias(usize),
    /// Pad, then cut an input-sized window at (row, col).
    PadSlice { pad: usize, row: usize, col: usize },
    Flip,
    Pool,
    Transform(TransformSpec),
}

#[derive(Clone, Copy, Debug)]
enum Loss {
    CrossEntropy,
    CrossEntropyEach,
    Dlr,
    Sum,
    Mean,
}

#[derive(Clone, Debug)]
enum Body {
    Chain {
        steps: Vec<Step>,
        weight: usize,
        bias: usize,
        loss: Loss,
    },
    /// TTE wrapper around a small classifier; only the image is a leaf.
    Ensemble(EnsembleModel<Classifier>),
}

/// A seeded random scalar-valued graph. Input 0 is always the image batch.
#[derive(Clone, Debug)]
pub struct RandomGraph {
    inputs: Vec<Tensor>,
    labels: Vec<usize>,
    targets: Vec<usize>,
    body: Body,
    primitives: Vec<&'static str>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng.random_range(-1.0..1.0))
}

fn random_transform(rng: &mut ChaCha8Rng, pad: usize) -> TransformSpec {
    let (o_x, o_y) = (rng.random_range(0..=2 * pad), rng.random_range(0..=2 * pad));
    match rng.random_range(0..4) {
        0 => TransformSpec::Flip,
        1 => TransformSpec::PadCrop { o_x, o_y, pad },
        2 => TransformSpec::FlipPadCrop { o_x, o_y, pad },
        _ => TransformSpec::Gaussian {
            k: 3,
            sigma: rng.random_range(0.5..2.0),
        },
    }
}

fn transform_name(t: &TransformSpec) -> &'static str {
    match t {
        TransformSpec::Identity => "identity",
        TransformSpec::Flip => "flip",
        TransformSpec::PadCrop { .. } => "padcrop",
        TransformSpec::FlipPadCrop { .. } => "flippadcrop",
        TransformSpec::Gaussian { .. } => "gaussian",
    }
}

impl RandomGraph {
    /// Every fifth seed gives a TTE ensemble over a freshly initialised
    /// classifier; the rest are random chains of primitives ending in a
    /// dense head and one of the scalar losses.
    pub fn sample(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = 2;
        if seed % 5 == 0 {
            let classifier = Classifier::init(Architecture::new(1, 8, 8, 4), seed)?;
            let count = rng.random_range(1..=3);
            let transforms: Vec<TransformSpec> = (0..count).map(|_| random_transform(&mut rng, 2)).collect();
            let mut primitives = vec!["ensemble", "conv2d", "channel_bias", "relu", "avg_pool2", "matmul", "row_bias", "cross_entropy"];
            primitives.extend(transforms.iter().map(transform_name));
            let labels = (0..b).map(|_| rng.random_range(0..4)).collect();
            return Ok(Self {
                inputs: vec![Tensor::from_fn(&[b, 1, 8, 8], |_| rng.random_range(0.0..1.0))],
                labels,
                targets: Vec::new(),
                body: Body::Ensemble(EnsembleModel::wrap(classifier, transforms)),
                primitives,
            });
        }

        let mut c = rng.random_range(1..=2);
        let mut h = [4, 6, 8][rng.random_range(0..3)];
        let mut inputs = vec![uniform(&mut rng, &[b, c, h, h], 1.0)];
        let mut primitives = Vec::new();
        let mut steps = Vec::new();
        for _ in 0..rng.random_range(3..=6) {
            let step = match rng.random_range(0..15) {
                0 => Step::Relu,
                1 => Step::Neg,
                2 => Step::Exp,
                3 => Step::LogSquare,
                4 => Step::Abs,
                5 => Step::Scale(rng.random_range(-2.0..2.0)),
                6..=8 => {
                    inputs.push(uniform(&mut rng, &[b, c, h, h], 1.0));
                    let i = inputs.len() - 1;
                    [Step::Add(i), Step::Sub(i), Step::Mul(i)][rng.random_range(0..3)].clone()
                }
                9 => {
                    let f = rng.random_range(1..=3);
                    let k = if rng.random_bool(0.75) { 3 } else { 1 };
                    inputs.push(uniform(&mut rng, &[f, c, k, k], 0.6));
                    c = f;
                    Step::Conv(inputs.len() - 1)
                }
                10 => {
                    inputs.push(uniform(&mut rng, &[c], 0.5));
                    Step::ChannelBias(inputs.len() - 1)
                }
                11 => {
                    let pad = rng.random_range(1..=2);
                    Step::PadSlice {
                        pad,
                        row: rng.random_range(0..=2 * pad),
                        col: rng.random_range(0..=2 * pad),
                    }
                }
                12 => Step::Flip,
                13 if h % 2 == 0 && h >= 4 => {
                    h /= 2;
                    Step::Pool
                }
                _ => Step::Transform(random_transform(&mut rng, 2)),
            };
            primitives.extend(match &step {
                Step::Relu => vec!["relu"],
                Step::Neg => vec!["neg"],
                Step::Exp => vec!["scale", "exp"],
                Step::LogSquare => vec!["mul", "add", "log"],
                Step::Abs => vec!["sign", "mul"],
                Step::Scale(_) => vec!["scale"],
                Step::Add(_) => vec!["add"],
                Step::Sub(_) => vec!["sub"],
                Step::Mul(_) => vec!["mul"],
                Step::Conv(_) => vec!["conv2d"],
                Step::ChannelBias(_) => vec!["channel_bias"],
                Step::PadSlice { .. } => vec!["pad2d", "slice2d"],
                Step::Flip => vec!["flip_width"],
                Step::Pool => vec!["avg_pool2"],
                Step::Transform(t) => vec![transform_name(t)],
            });
            steps.push(step);
        }
        let classes = rng.random_range(4..=5);
        inputs.push(uniform(&mut rng, &[c * h * h, classes], 0.5));
        let weight = inputs.len() - 1;
        inputs.push(uniform(&mut rng, &[classes], 0.5));
        let bias = inputs.len() - 1;
        let loss = [Loss::CrossEntropy, Loss::CrossEntropyEach, Loss::Dlr, Loss::Sum, Loss::Mean][rng.random_range(0..5)];
        primitives.extend(["reshape", "matmul", "row_bias"]);
        primitives.extend(match loss {
            Loss::CrossEntropy => vec!["cross_entropy"],
            Loss::CrossEntropyEach => vec!["cross_entropy_each", "sum"],
            Loss::Dlr => vec!["dlr_targeted", "mean"],
            Loss::Sum => vec!["sum"],
            Loss::Mean => vec!["mean"],
        });
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..classes)).collect();
        let targets = labels
            .iter()
            .map(|&y| (y + rng.random_range(1..classes)) % classes)
            .collect();
        primitives.sort_unstable();
        primitives.dedup();
        let mut graph = Self {
            inputs,
            labels,
            targets,
            body: Body::Chain {
                steps,
                weight,
                bias,
                loss,
            },
            primitives,
        };
        if let Loss::Dlr = loss {
            graph.avoid_constant_dlr()?;
        }
        Ok(graph)
    }

    /// With {label, target} equal to the first and third ranked classes the
    /// ratio is identically ±1 and its gradient is pure roundoff; move the
    /// target off such rows.
    fn avoid_constant_dlr(&mut self) -> Result<()> {
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = self.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let scores = self.scores(&tape, &leaves)?.value();
        let n = scores.shape()[1];
        for (i, row) in scores.data().chunks(n).enumerate() {
            let rank = crate::autodiff::rank_desc(row);
            let (y, t) = (self.labels[i], &mut self.targets[i]);
            let degenerate = |t: usize| {
                let pair = [y.min(t), y.max(t)];
                pair == [rank[0].min(rank[2]), rank[0].max(rank[2])]
            };
            while degenerate(*t) || *t == y {
                *t = (*t + 1) % n;
            }
        }
        Ok(())
    }

    /// Names of the primitives and transforms this graph records.
    pub fn primitives(&self) -> &[&'static str] {
        &self.primitives
    }
}

impl Graph for RandomGraph {
    fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }

    fn build<'t>(&self, tape: &'t Tape, leaves: &[Var<'t>]) -> Result<Var<'t>> {
        let scores = self.scores(tape, leaves)?;
        match &self.body {
            Body::Ensemble(_) => tape.softmax_cross_entropy(scores, &self.labels),
            Body::Chain { loss, .. } => match loss {
                Loss::CrossEntropy => tape.softmax_cross_entropy(scores, &self.labels),
                Loss::CrossEntropyEach => tape.cross_entropy_each(scores, &self.labels)?.sum(),
                Loss::Dlr => tape.dlr_targeted_each(scores, &self.labels, &self.targets)?.mean(),
                Loss::Sum => scores.sum(),
                Loss::Mean => scores.mean(),
            },
        }
    }
}

impl RandomGraph {
    fn scores<'t>(&self, tape: &'t Tape, leaves: &[Var<'t>]) -> Result<Var<'t>> {
        let (steps, weight, bias) = match &self.body {
            Body::Ensemble(m) => return m.forward(tape, leaves[0]),
            Body::Chain { steps, weight, bias, .. } => (steps, *weight, *bias),
        };
        let mut x = leaves[0];
        for step in steps {
            x = match *step {
                Step::Relu => x.relu()?,
                Step::Neg => x.neg()?,
                Step::Exp => x.scale(0.5)?.exp()?,
                Step::LogSquare => {
                    let one = tape.leaf(Tensor::full(&x.shape(), 1.0));
                    x.mul(x)?.add(one)?.ln()?
                }
                Step::Abs => x.mul(x.sign()?)?,
                Step::Scale(s) => x.scale(s)?,
                Step::Add(i) => x.add(leaves[i])?,
                Step::Sub(i) => x.sub(leaves[i])?,
                Step::Mul(i) => x.mul(leaves[i])?,
                Step::Conv(i) => tape.conv2d(x, leaves[i])?,
                Step::ChannelBias(i) => tape.add_channel_bias(x, leaves[i])?,
                Step::PadSlice { pad, row, col } => {
                    let size = x.shape()[2];
                    tape.slice2d(tape.pad2d(x, pad)?, row, col, size)?
                }
                Step::Flip => tape.flip_width(x)?,
                Step::Pool => tape.avg_pool2(x)?,
                Step::Transform(t) => t.apply(tape, x)?,
            };
        }
        let s = x.shape();
        let flat = tape.reshape(x, &[s[0], s[1..].iter().product()])?;
        tape.add_row_bias(flat.matmul(leaves[weight])?, leaves[bias])
    }
}
