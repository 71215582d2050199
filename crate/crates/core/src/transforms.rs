//! Fixed, deterministic, differentiable image transforms.
//!
//! Every transform is built from indexing primitives (or a fixed
//! convolution for the Gaussian filter), so gradients flow straight back to
//! the selected input pixels. Parameters never change after construction.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Default padding for pad-and-crop transforms.
pub const DEFAULT_PAD: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TransformSpec {
    Identity,
    /// Mirror along the width axis.
    Flip,
    /// Zero-pad by `pad`, then take an input-sized window at column `o_x`,
    /// row `o_y`.
    PadCrop { o_x: usize, o_y: usize, pad: usize },
    /// `PadCrop` followed by `Flip`, sharing the crop offsets.
    FlipPadCrop { o_x: usize, o_y: usize, pad: usize },
    /// Same-padded `k`×`k` Gaussian blur, weights renormalised to sum to one.
    Gaussian { k: usize, sigma: f64 },
}

impl TransformSpec {
    pub fn pad_crop(o_x: usize, o_y: usize, pad: usize) -> Result<Self> {
        let spec = TransformSpec::PadCrop { o_x, o_y, pad };
        spec.validate()?;
        Ok(spec)
    }

    pub fn flip_pad_crop(o_x: usize, o_y: usize, pad: usize) -> Result<Self> {
        let spec = TransformSpec::FlipPadCrop { o_x, o_y, pad };
        spec.validate()?;
        Ok(spec)
    }

    pub fn gaussian(k: usize, sigma: f64) -> Result<Self> {
        let spec = TransformSpec::Gaussian { k, sigma };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            TransformSpec::PadCrop { o_x, o_y, pad }
            | TransformSpec::FlipPadCrop { o_x, o_y, pad } => {
                if o_x > 2 * pad || o_y > 2 * pad {
                    return Err(invalid(format!(
                        "crop offsets ({o_x}, {o_y}) outside [0, {}]",
                        2 * pad
                    )));
                }
            }
            TransformSpec::Gaussian { k, sigma } => {
                if k % 2 == 0 {
                    return Err(invalid(format!("Gaussian filter size must be odd, got {k}")));
                }
                if !(sigma > 0.0 && sigma.is_finite()) {
                    return Err(invalid(format!("Gaussian sigma must be positive, got {sigma}")));
                }
            }
            TransformSpec::Identity | TransformSpec::Flip => {}
        }
        Ok(())
    }

    /// Records the transform of `x` (`[B, C, H, W]`) on `tape`.
    pub fn apply<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        self.validate()?;
        match *self {
            TransformSpec::Identity => Ok(x),
            TransformSpec::Flip => tape.flip_width(x),
            TransformSpec::PadCrop { o_x, o_y, pad } => pad_crop(tape, x, o_x, o_y, pad),
            TransformSpec::FlipPadCrop { o_x, o_y, pad } => {
                let cropped = pad_crop(tape, x, o_x, o_y, pad)?;
                tape.flip_width(cropped)
            }
            TransformSpec::Gaussian { k, sigma } => {
                let [_, c, _, _] = x.value().dims4()?;
                let kernel = tape.leaf(gaussian_filter_bank(c, k, sigma));
                tape.conv2d(x, kernel)
            }
        }
    }

    /// Applies the transform outside of any gradient computation.
    pub fn apply_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let out = self.apply(&tape, tape.leaf(x.clone()))?;
        Ok((*out.value()).clone())
    }
}

fn pad_crop<'t>(tape: &'t Tape, x: Var<'t>, o_x: usize, o_y: usize, pad: usize) -> Result<Var<'t>> {
    let [_, _, h, w] = x.value().dims4()?;
    if h != w {
        return Err(invalid(format!("pad-and-crop needs square images, got {h}x{w}")));
    }
    let padded = tape.pad2d(x, pad)?;
    tape.slice2d(padded, o_y, o_x, h)
}

/// Normalised `k`×`k` Gaussian weights, row-major.
pub fn gaussian_kernel(k: usize, sigma: f64) -> Vec<f64> {
    let half = (k / 2) as f64;
    let mut w: Vec<f64> = (0..k * k)
        .map(|i| {
            let dy = (i / k) as f64 - half;
            let dx = (i % k) as f64 - half;
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// `[C, C, k, k]` bank that blurs each channel independently.
fn gaussian_filter_bank(channels: usize, k: usize, sigma: f64) -> Tensor {
    let g = gaussian_kernel(k, sigma);
    let mut bank = Tensor::zeros(&[channels, channels, k, k]);
    for c in 0..channels {
        let off = (c * channels + c) * k * k;
        bank.data_mut()[off..off + k * k].copy_from_slice(&g);
    }
    bank
}

/// Every crop of the `(2·pad + 1)²` offset grid, rows of `o_y` outermost.
pub fn enumerate_crops(pad: usize) -> Vec<TransformSpec> {
    let side = 2 * pad + 1;
    (0..side * side)
        .map(|i| TransformSpec::PadCrop {
            o_x: i % side,
            o_y: i / side,
            pad,
        })
        .collect()
}

/// `n` distinct crop offsets drawn from the offset grid by a seeded shuffle.
///
/// Prefixes are nested: the first `m` crops for `n` are the crops for `m`.
/// With `flip_variants`, the `n` crops are followed by their flipped twins.
pub fn random_crop_set(n: usize, pad: usize, flip_variants: bool, seed: u64) -> Result<Vec<TransformSpec>> {
    let side = 2 * pad + 1;
    if n == 0 {
        return Err(invalid("random_crop_set needs n >= 1"));
    }
    if n > side * side {
        return Err(invalid(format!(
            "{n} crops requested but only {} distinct offsets exist for pad {pad}",
            side * side
        )));
    }
    let mut grid: Vec<(usize, usize)> = (0..side * side).map(|i| (i % side, i / side)).collect();
    grid.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let crops = &grid[..n];
    let mut out: Vec<TransformSpec> = crops
        .iter()
        .map(|&(o_x, o_y)| TransformSpec::PadCrop { o_x, o_y, pad })
        .collect();
    if flip_variants {
        out.extend(
            crops
                .iter()
                .map(|&(o_x, o_y)| TransformSpec::FlipPadCrop { o_x, o_y, pad }),
        );
    }
    Ok(out)
}

/// A row of the transform-set ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationRow {
    pub flip: bool,
    pub crops: usize,
    pub flipped_crops: bool,
}

impl AblationRow {
    /// The 14 rows in reporting order: the baseline, then the 13 TTE sets.
    pub fn all() -> Vec<AblationRow> {
        let mut rows = vec![
            AblationRow { flip: false, crops: 0, flipped_crops: false },
            AblationRow { flip: true, crops: 0, flipped_crops: false },
        ];
        for (flip, flipped_crops) in [(false, false), (true, false), (true, true)] {
            for crops in 1..=4 {
                rows.push(AblationRow { flip, crops, flipped_crops });
            }
        }
        rows
    }

    pub fn is_baseline(&self) -> bool {
        !self.flip && self.crops == 0
    }

    /// Short machine name, e.g. `flip+3crops+3flipped`.
    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if self.is_baseline() {
            return "none".into();
        }
        if self.flip {
            parts.push("flip".to_string());
        }
        if self.crops > 0 {
            let s = if self.crops == 1 { "" } else { "s" };
            parts.push(format!("{}crop{s}", self.crops));
        }
        if self.flipped_crops {
            parts.push(format!("{}flipped", self.crops));
        }
        parts.join("+")
    }

    /// Human-readable label, e.g. `+ flip + 3 crops + 3 flipped-crops`.
    pub fn label(&self) -> String {
        if self.is_baseline() {
            return "baseline".into();
        }
        let mut out = String::new();
        if self.flip {
            out.push_str("+ flip");
        }
        if self.crops > 0 {
            let s = if self.crops == 1 { "" } else { "s" };
            out.push_str(&format!("{}+ {} crop{s}", if out.is_empty() { "" } else { " " }, self.crops));
        }
        if self.flipped_crops {
            let s = if self.crops == 1 { "" } else { "s" };
            out.push_str(&format!(" + {} flipped-crop{s}", self.crops));
        }
        out
    }

    pub fn transforms(&self, pad: usize, seed: u64) -> Result<Vec<TransformSpec>> {
        let mut out = Vec::new();
        if self.flip {
            out.push(TransformSpec::Flip);
        }
        if self.crops > 0 {
            out.extend(random_crop_set(self.crops, pad, self.flipped_crops, seed)?);
        }
        Ok(out)
    }
}

impl FromStr for AblationRow {
    type Err = Error;

    fn from_str(name: &str) -> Result<Self> {
        AblationRow::all()
            .into_iter()
            .find(|row| row.name() == name.trim())
            .ok_or_else(|| invalid(format!("unknown transform set `{name}`")))
    }
}

/// Transform list for a named ablation row (`none`, `flip`, `3crops`,
/// `flip+2crops`, `flip+4crops+4flipped`, ...).
pub fn named_set(name: &str, pad: usize, seed: u64) -> Result<Vec<TransformSpec>> {
    name.parse::<AblationRow>()?.transforms(pad, seed)
}

impl fmt::Display for TransformSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransformSpec::Identity => write!(f, "identity"),
            TransformSpec::Flip => write!(f, "flip"),
            TransformSpec::PadCrop { o_x, o_y, pad } => write!(f, "padcrop({o_x},{o_y},{pad})"),
            TransformSpec::FlipPadCrop { o_x, o_y, pad } => {
                write!(f, "flippadcrop({o_x},{o_y},{pad})")
            }
            TransformSpec::Gaussian { k, sigma } => write!(f, "gaussian({k},{sigma})"),
        }
    }
}

impl FromStr for TransformSpec {
    type Err = Error;

    fn from_str(token: &str) -> Result<Self> {
        let token = token.trim();
        let (kind, args) = match token.find('(') {
            Some(i) if token.ends_with(')') => (&token[..i], &token[i + 1..token.len() - 1]),
            Some(_) => return Err(invalid(format!("malformed transform `{token}`"))),
            None => (token, ""),
        };
        let nums: Vec<&str> = if args.is_empty() {
            Vec::new()
        } else {
            args.split(',').map(str::trim).collect()
        };
        let int = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| invalid(format!("bad integer `{s}` in `{token}`")))
        };
        let arity = |n: usize| {
            if nums.len() == n {
                Ok(())
            } else {
                Err(invalid(format!("`{kind}` takes {n} arguments, got `{token}`")))
            }
        };
        let spec = match kind {
            "identity" => {
                arity(0)?;
                TransformSpec::Identity
            }
            "flip" => {
                arity(0)?;
                TransformSpec::Flip
            }
            "padcrop" | "flippadcrop" => {
                arity(3)?;
                let (o_x, o_y, pad) = (int(nums[0])?, int(nums[1])?, int(nums[2])?);
                if kind == "padcrop" {
                    TransformSpec::PadCrop { o_x, o_y, pad }
                } else {
                    TransformSpec::FlipPadCrop { o_x, o_y, pad }
                }
            }
            "gaussian" => {
                arity(2)?;
                let sigma = nums[1]
                    .parse::<f64>()
                    .map_err(|_| invalid(format!("bad sigma in `{token}`")))?;
                TransformSpec::Gaussian { k: int(nums[0])?, sigma }
            }
            _ => return Err(invalid(format!("unknown transform kind `{kind}`"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Comma-separated manifest form, e.g. `flip,padcrop(1,7,4)`.
pub fn format_set(specs: &[TransformSpec]) -> String {
    specs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Inverse of [`format_set`]; commas inside parentheses belong to a token.
pub fn parse_set(text: &str) -> Result<Vec<TransformSpec>> {
    let text = text.trim();
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    let (mut depth, mut start) = (0i32, 0usize);
    for (i, ch) in text.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                out.push(text[start..i].parse()?);
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(text[start..].parse()?);
    Ok(out)
}
