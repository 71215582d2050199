//! Synthetic glyph datasets and the `TTED` binary file format.
//!
//! Every glyph is mirror-symmetric about its vertical axis and sits within
//! ±3 px of the image centre, so horizontal flips and pad-and-crop shifts of
//! up to 4 px never change the label.
//!
//! File layout (little-endian): `b"TTED"`, `u16` version, five `u32`
//! (B, C, H, W, N), then B·C·H·W `f32` pixels and B `u8` labels.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TTED";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 5 * 4;

/// Maximum centre offset from the image centre, in pixels.
pub const CENTER_JITTER: f64 = 3.0;
/// Largest translation the glyph is guaranteed to survive.
pub const SAFE_SHIFT: f64 = 4.0;
const MAX_GLYPH_RADIUS: f64 = 4.5;
const NOISE_AMPLITUDE: f64 = 0.1;

/// Names of the glyph classes, in label order.
pub const GLYPHS: [&str; 10] = [
    "disk", "ring", "plus", "cross", "hbar", "vbar", "square", "checker", "triangle", "tee",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[B, C, H, W]`, every pixel in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

/// Shape parameters for [`generate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthConfig {
    pub count: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl SynthConfig {
    pub fn new(count: usize, classes: usize, height: usize, width: usize) -> Self {
        Self {
            count,
            classes,
            height,
            width,
            channels: 1,
        }
    }
}

/// Geometry of one rendered glyph.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlyphPlacement {
    pub class: usize,
    /// Centre column in continuous pixel coordinates.
    pub center_x: f64,
    pub center_y: f64,
    pub radius: f64,
}

/// Glyph radius that keeps a ±`CENTER_JITTER` glyph inside the frame after a
/// `SAFE_SHIFT` translation.
pub fn glyph_radius(height: usize, width: usize) -> f64 {
    let half = (height.min(width) as f64 - 1.0) / 2.0;
    (half - CENTER_JITTER - SAFE_SHIFT).clamp(0.5, MAX_GLYPH_RADIUS)
}

/// Glyph membership test in units where the radius is 4.5; `u` is the
/// horizontal offset and only enters through `|u|`.
fn glyph_mask(class: usize, u: f64, v: f64) -> bool {
    let (au, av) = (u.abs(), v.abs());
    let r = (u * u + v * v).sqrt();
    let inside = au <= 4.5 && av <= 4.5;
    match class {
        0 => r <= 4.0,
        1 => (2.6..=4.5).contains(&r),
        2 => inside && (au <= 1.0 || av <= 1.0) && r <= 4.5,
        3 => inside && (au - av).abs() <= 1.0,
        4 => au <= 4.5 && av <= 1.5,
        5 => au <= 1.5 && av <= 4.5,
        6 => inside && au.max(av) >= 3.0,
        // 3×3 board of 3-px cells: corners and centre lit
        7 => inside && ((au < 1.5) == (av < 1.5)),
        8 => (-4.0..=4.0).contains(&v) && au <= (v + 4.0) / 2.0 + 0.5,
        _ => (inside && (v + 3.5).abs() <= 1.0) || (au <= 1.0 && (-3.5..=4.5).contains(&v)),
    }
}

/// Noise-free rendering of a glyph, one channel, values in `{0, 1}`.
pub fn render_glyph(p: &GlyphPlacement, height: usize, width: usize) -> Vec<f64> {
    let scale = MAX_GLYPH_RADIUS / p.radius;
    let mut out = vec![0.0; height * width];
    for y in 0..height {
        for x in 0..width {
            let u = (x as f64 - p.center_x) * scale;
            let v = (y as f64 - p.center_y) * scale;
            if glyph_mask(p.class, u, v) {
                out[y * width + x] = 1.0;
            }
        }
    }
    out
}

/// Draws the placement of the next sample from `rng`.
fn draw_placement(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> GlyphPlacement {
    let class = rng.random_range(0..cfg.classes);
    let cx = (cfg.width as f64 - 1.0) / 2.0 + rng.random_range(-CENTER_JITTER..=CENTER_JITTER);
    let cy = (cfg.height as f64 - 1.0) / 2.0 + rng.random_range(-CENTER_JITTER..=CENTER_JITTER);
    GlyphPlacement {
        class,
        center_x: cx,
        center_y: cy,
        radius: glyph_radius(cfg.height, cfg.width),
    }
}

fn validate(cfg: &SynthConfig) -> Result<()> {
    if cfg.height < 16 || cfg.width < 16 {
        return Err(invalid(format!(
            "image size {}x{} below the 16x16 minimum",
            cfg.height, cfg.width
        )));
    }
    if !(2..=GLYPHS.len()).contains(&cfg.classes) {
        return Err(invalid(format!(
            "classes must be in [2, {}], got {}",
            GLYPHS.len(),
            cfg.classes
        )));
    }
    if cfg.channels == 0 || cfg.count == 0 {
        return Err(invalid("count and channels must be positive"));
    }
    Ok(())
}

/// Generates `cfg.count` noisy glyph images; the same seed always yields the
/// same bits. Also returns the per-sample placements.
pub fn generate_with_placements(
    cfg: &SynthConfig,
    seed: u64,
) -> Result<(Dataset, Vec<GlyphPlacement>)> {
    validate(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
    let mut data = Vec::with_capacity(cfg.count * c * h * w);
    let mut labels = Vec::with_capacity(cfg.count);
    let mut placements = Vec::with_capacity(cfg.count);
    for _ in 0..cfg.count {
        let p = draw_placement(&mut rng, cfg);
        let mask = render_glyph(&p, h, w);
        for _ in 0..c {
            let intensity = rng.random_range(0.4..=1.0);
            for &m in &mask {
                let noise = rng.random_range(-NOISE_AMPLITUDE..=NOISE_AMPLITUDE);
                let v = (intensity * m + noise).clamp(0.0, 1.0);
                data.push(v as f32 as f64);
            }
        }
        labels.push(p.class);
        placements.push(p);
    }
    let ds = Dataset {
        images: Tensor::new(vec![cfg.count, c, h, w], data)?,
        labels,
        classes: cfg.classes,
    };
    Ok((ds, placements))
}

pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    Ok(generate_with_placements(cfg, seed)?.0)
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let [b, ..] = images.dims4()?;
        if b != labels.len() {
            return Err(invalid(format!(
                "{} labels for {b} images",
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("pixel values must lie in [0, 1]"));
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of a single image.
    pub fn image_dims(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Images and labels at the given indices, in that order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let parts: Vec<Tensor> = indices.iter().map(|&i| self.images.instance(i)).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let images = if parts.is_empty() {
            let mut shape = self.images.shape().to_vec();
            shape[0] = 0;
            Tensor::zeros(&shape)
        } else {
            Tensor::concat_batch(&parts).expect("instances share a shape")
        };
        (images, labels)
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images.batch_slice(0, n),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
        }
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.gather(indices);
        Dataset {
            images,
            labels,
            classes: self.classes,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let [b, c, h, w] = self.images.dims4()?;
        if self.classes > 256 {
            return Err(invalid("labels are stored as u8; at most 256 classes"));
        }
        let dims = [b, c, h, w, self.classes];
        let mut out = Vec::with_capacity(HEADER_LEN + self.images.len() * 4 + b);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for d in dims {
            let d = u32::try_from(d).map_err(|_| invalid(format!("dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in self.images.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend(self.labels.iter().map(|&l| l as u8));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!(
                "truncated header: {} bytes",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let dim = |i: usize| {
            let o = 6 + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
        };
        let (b, c, h, w, n) = (dim(0), dim(1), dim(2), dim(3), dim(4));
        let pixels = [b, c, h, w]
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("dimension overflow".into()))?;
        let expected = pixels
            .checked_mul(4)
            .and_then(|p| p.checked_add(HEADER_LEN + b))
            .ok_or_else(|| Error::Format("dimension overflow".into()))?;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "file length {} does not match header-implied length {expected}",
                bytes.len()
            )));
        }
        let body = &bytes[HEADER_LEN..HEADER_LEN + pixels * 4];
        let data: Vec<f64> = body
            .chunks_exact(4)
            .map(|ch| f32::from_le_bytes(ch.try_into().unwrap()) as f64)
            .collect();
        let labels = bytes[HEADER_LEN + pixels * 4..]
            .iter()
            .map(|&l| l as usize)
            .collect();
        Dataset::new(Tensor::new(vec![b, c, h, w], data)?, labels, n)
            .map_err(|e| Error::Format(e.to_string()))
    }

    /// Writes the `TTED` file via a temporary sibling and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Seeded random permutation split into disjoint (train, test) parts.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(invalid(format!(
                "train fraction must be in (0, 1), got {train_fraction}"
            )));
        }
        let n_train = (train_fraction * self.len() as f64).round() as usize;
        if n_train == 0 || n_train == self.len() {
            return Err(invalid(format!(
                "split of {} samples at {train_fraction} leaves an empty side",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok((self.subset(&order[..n_train]), self.subset(&order[n_train..])))
    }
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    let tmp = path.with_file_name(name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
