//! Classifiers: the [`Model`] abstraction, the small convnet used throughout,
//! a linear model for analytic checks, and checkpoint files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::data::write_atomic;
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Anything that maps `[B, C, H, W]` images to `[B, N]` scores.
pub trait Model {
    fn num_classes(&self) -> usize;

    /// Records the forward pass on `tape`. Models that cannot expose
    /// gradients return [`Error::GradientUnavailable`].
    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>>;

    /// Scores without keeping a tape around.
    fn scores(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let out = self.forward(&tape, tape.leaf(x.clone()))?;
        Ok((*out.value()).clone())
    }

    /// Argmax class per instance, ties to the lowest index.
    fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.scores(x)?.argmax_rows())
    }
}

impl<M: Model + ?Sized> Model for &M {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }

    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        (**self).forward(tape, x)
    }

    fn scores(&self, x: &Tensor) -> Result<Tensor> {
        (**self).scores(x)
    }
}

impl<M: Model + ?Sized> Model for Box<M> {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }

    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        (**self).forward(tape, x)
    }

    fn scores(&self, x: &Tensor) -> Result<Tensor> {
        (**self).scores(x)
    }
}

/// Score-only access to a model: forward on a tape is refused.
pub struct ScoreOnly<F> {
    classes: usize,
    oracle: F,
}

impl<F: Fn(&Tensor) -> Result<Tensor>> ScoreOnly<F> {
    pub fn new(classes: usize, oracle: F) -> Self {
        Self { classes, oracle }
    }
}

impl<F: Fn(&Tensor) -> Result<Tensor>> Model for ScoreOnly<F> {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn forward<'t>(&self, _tape: &'t Tape, _x: Var<'t>) -> Result<Var<'t>> {
        Err(Error::GradientUnavailable)
    }

    fn scores(&self, x: &Tensor) -> Result<Tensor> {
        (self.oracle)(x)
    }
}

/// Affine classifier `scores = flatten(x)·W + b`, with `W` of shape `[D, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let [_, n] = weight.dims2()?;
        if bias.shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "Linear::new",
                left: weight.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        Ok(Self { weight, bias })
    }
}

impl Model for Linear {
    fn num_classes(&self) -> usize {
        self.bias.len()
    }

    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let d = self.weight.shape()[0];
        let flat = tape.reshape(x, &[shape[0], d])?;
        let z = flat.matmul(tape.leaf(self.weight.clone()))?;
        tape.add_row_bias(z, tape.leaf(self.bias.clone()))
    }
}

/// Input geometry and widths of the convnet.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub filters: [usize; 2],
}

pub const KERNEL: usize = 3;
/// Descriptor written into checkpoints.
pub const ARCH_DESCRIPTOR: &str = "conv3x3-relu-avgpool2-conv3x3-relu-avgpool2-dense";

impl Architecture {
    pub fn new(channels: usize, height: usize, width: usize, classes: usize) -> Self {
        Self {
            channels,
            height,
            width,
            classes,
            filters: [8, 16],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.height % 4 != 0 || self.width % 4 != 0 || self.height == 0 || self.width == 0 {
            return Err(invalid(format!(
                "input {}x{} must be a positive multiple of 4 for two pooling stages",
                self.height, self.width
            )));
        }
        if self.classes < 2 || self.channels == 0 || self.filters.contains(&0) {
            return Err(invalid("classes >= 2 and positive channel/filter counts required"));
        }
        Ok(())
    }

    fn dense_inputs(&self) -> usize {
        self.filters[1] * (self.height / 4) * (self.width / 4)
    }

    /// Shapes of kernel1, bias1, kernel2, bias2, dense weight, dense bias.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let [f1, f2] = self.filters;
        vec![
            vec![f1, self.channels, KERNEL, KERNEL],
            vec![f1],
            vec![f2, f1, KERNEL, KERNEL],
            vec![f2],
            vec![self.dense_inputs(), self.classes],
            vec![self.classes],
        ]
    }
}

/// Two conv–relu–pool stages followed by a dense layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub arch: Architecture,
    pub seed: u64,
    /// Free-form description of how the weights were obtained.
    pub regime: String,
    params: Vec<Tensor>,
}

impl Classifier {
    /// He-style (fan-in scaled) normal initialisation, zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch
            .param_shapes()
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    return Tensor::zeros(&shape);
                }
                let fan_in: usize = if shape.len() == 4 {
                    shape[1..].iter().product()
                } else {
                    shape[0]
                };
                let std = (2.0 / fan_in as f64).sqrt();
                Tensor::from_fn(&shape, |_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * std
                })
            })
            .collect();
        Ok(Self {
            arch,
            seed,
            regime: "untrained".into(),
            params,
        })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Forward pass with caller-provided parameter variables (for training).
    pub fn forward_with<'t>(&self, tape: &'t Tape, x: Var<'t>, p: &[Var<'t>]) -> Result<Var<'t>> {
        let xs = x.shape();
        let a = self.arch;
        if xs.len() != 4 || xs[1..] != [a.channels, a.height, a.width] {
            return Err(Error::ShapeMismatch {
                op: "Classifier::forward",
                left: xs,
                right: vec![a.channels, a.height, a.width],
            });
        }
        let h = tape.conv2d(x, p[0])?;
        let h = tape.add_channel_bias(h, p[1])?.relu()?;
        let h = tape.avg_pool2(h)?;
        let h = tape.conv2d(h, p[2])?;
        let h = tape.add_channel_bias(h, p[3])?.relu()?;
        let h = tape.avg_pool2(h)?;
        let flat = tape.reshape(h, &[xs[0], a.dense_inputs()])?;
        let z = flat.matmul(p[4])?;
        tape.add_row_bias(z, p[5])
    }

    pub fn param_leaves<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    fn header(&self) -> String {
        let a = self.arch;
        let mut s = String::new();
        let _ = writeln!(s, "TTE-CHECKPOINT 1");
        let _ = writeln!(s, "arch {ARCH_DESCRIPTOR}");
        let _ = writeln!(s, "filters {},{}", a.filters[0], a.filters[1]);
        let _ = writeln!(s, "channels {}", a.channels);
        let _ = writeln!(s, "height {}", a.height);
        let _ = writeln!(s, "width {}", a.width);
        let _ = writeln!(s, "classes {}", a.classes);
        let _ = writeln!(s, "seed {}", self.seed);
        let _ = writeln!(s, "regime {}", self.regime.replace('\n', " "));
        let _ = writeln!(s, "params {}", self.param_count());
        let _ = writeln!(s, "end");
        s
    }

    /// Text header followed by little-endian `f64` parameters.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header().into_bytes();
        for p in &self.params {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let marker = b"\nend\n";
        let end = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .ok_or_else(|| Error::Format("checkpoint header not terminated".into()))?
            + marker.len();
        let header = std::str::from_utf8(&bytes[..end])
            .map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
        let mut lines = header.lines();
        if lines.next() != Some("TTE-CHECKPOINT 1") {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let mut fields = std::collections::BTreeMap::new();
        for line in lines {
            if line == "end" {
                break;
            }
            let (k, v) = line.split_once(' ').unwrap_or((line, ""));
            fields.insert(k, v);
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::Format(format!("checkpoint missing `{k}`")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("checkpoint field `{k}` is not a number")))
        };
        if get("arch")? != ARCH_DESCRIPTOR {
            return Err(Error::Format(format!("unknown architecture `{}`", get("arch")?)));
        }
        let filters: Vec<usize> = get("filters")?
            .split(',')
            .map(|f| f.parse().map_err(|_| Error::Format("bad filters".into())))
            .collect::<Result<_>>()?;
        if filters.len() != 2 {
            return Err(Error::Format("bad filters".into()));
        }
        let arch = Architecture {
            channels: num("channels")? as usize,
            height: num("height")? as usize,
            width: num("width")? as usize,
            classes: num("classes")? as usize,
            filters: [filters[0], filters[1]],
        };
        arch.validate().map_err(|e| Error::Format(e.to_string()))?;
        let count = num("params")? as usize;
        let shapes = arch.param_shapes();
        let expected: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if count != expected || bytes.len() != end + 8 * expected {
            return Err(Error::Format(format!(
                "checkpoint body holds {} bytes, architecture needs {}",
                bytes.len() - end,
                8 * expected
            )));
        }
        let mut values = bytes[end..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let params = shapes
            .into_iter()
            .map(|s| {
                let n = s.iter().product();
                Tensor::from_parts(s, values.by_ref().take(n).collect())
            })
            .collect();
        Ok(Self {
            arch,
            seed: num("seed")?,
            regime: get("regime")?.to_string(),
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

impl Model for Classifier {
    fn num_classes(&self) -> usize {
        self.arch.classes
    }

    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let p = self.param_leaves(tape);
        self.forward_with(tape, x, &p)
    }
}

/// Predictions over a dataset-sized tensor, evaluated in chunks.
pub fn predict_batched<M: Model + ?Sized>(model: &M, images: &Tensor, chunk: usize) -> Result<Vec<usize>> {
    let b = images.shape()[0];
    let mut out = Vec::with_capacity(b);
    let mut start = 0;
    while start < b {
        let end = (start + chunk.max(1)).min(b);
        out.extend(model.predict(&images.batch_slice(start, end))?);
        start = end;
    }
    Ok(out)
}
