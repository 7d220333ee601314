//! Colored (and optionally rotated) digit images.
//!
//! Digit strokes come either from IDX files on disk (the MNIST distribution
//! format) or from a procedural glyph generator that draws each digit as a few
//! jittered polylines with a per-sample slant, scale, offset and stroke width.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::factors::{Factor, FactorGrid, FactorSpec, Image, ImageShape, Renderer};
use super::rotate::rotate_plane;
use super::splits::SplitPolicy;
use crate::error::{argument, config, Error, Result};

pub type Rgb = [f64; 3];

/// Fixed colors for the digit datasets. Background indices run over
/// `bg_train` followed by `bg_test`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Palette {
    pub bg_train: Vec<Rgb>,
    pub bg_test: Vec<Rgb>,
    pub fg: Vec<Rgb>,
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            bg_train: vec![[0.85, 0.15, 0.15], [0.15, 0.65, 0.20], [0.15, 0.25, 0.85]],
            bg_test: vec![[0.90, 0.80, 0.10], [0.55, 0.15, 0.75], [0.10, 0.75, 0.80]],
            fg: vec![
                [1.00, 1.00, 1.00],
                [0.00, 0.00, 0.00],
                [1.00, 0.55, 0.00],
                [1.00, 0.60, 0.80],
                [0.45, 0.25, 0.05],
                [0.60, 0.60, 0.60],
            ],
        }
    }
}

impl Palette {
    pub fn validate(&self) -> Result<()> {
        if self.bg_train.is_empty() || self.bg_test.is_empty() || self.fg.is_empty() {
            return Err(config("palette lists must be non-empty"));
        }
        for c in self.bg_train.iter().chain(&self.bg_test).chain(&self.fg) {
            if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(config(format!("palette color {c:?} outside [0, 1]")));
            }
        }
        let key = |c: &Rgb| c.map(f64::to_bits);
        let bg_train: HashSet<_> = self.bg_train.iter().map(key).collect();
        let bg_test: HashSet<_> = self.bg_test.iter().map(key).collect();
        let fg: HashSet<_> = self.fg.iter().map(key).collect();
        if !bg_train.is_disjoint(&bg_test) {
            return Err(Error::Precondition(
                "train and test background palettes overlap".into(),
            ));
        }
        if !fg.is_disjoint(&bg_train) || !fg.is_disjoint(&bg_test) {
            return Err(Error::Precondition(
                "digit palette shares a color with a background palette".into(),
            ));
        }
        Ok(())
    }

    pub fn num_bg(&self) -> usize {
        self.bg_train.len() + self.bg_test.len()
    }

    pub fn bg(&self, index: usize) -> Result<Rgb> {
        self.bg_train
            .iter()
            .chain(&self.bg_test)
            .nth(index)
            .copied()
            .ok_or_else(|| config(format!("unknown background palette index {index}")))
    }

    pub fn fg_color(&self, index: usize) -> Result<Rgb> {
        self.fg
            .get(index)
            .copied()
            .ok_or_else(|| config(format!("unknown digit palette index {index}")))
    }
}

/// Train and test rotation angle sets in degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RotationSets {
    pub train: Vec<f64>,
    pub test: Vec<f64>,
}

impl Default for RotationSets {
    fn default() -> Self {
        Self {
            train: vec![0.0, 22.5, -22.5, 45.0, -45.0],
            test: vec![-75.0, -65.0, 65.0, 75.0],
        }
    }
}

impl RotationSets {
    /// Angle list used as factor values: training angles first, then test
    /// angles not already present.
    pub fn angles(&self) -> Vec<f64> {
        let mut out = self.train.clone();
        for a in &self.test {
            if !out.contains(a) {
                out.push(*a);
            }
        }
        out
    }

    pub fn test_indices(&self) -> Vec<usize> {
        let all = self.angles();
        (self.train.len()..all.len()).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.train.is_empty() || self.test.is_empty() {
            return Err(config("rotation sets must be non-empty"));
        }
        if self.train.iter().chain(&self.test).any(|a| !a.is_finite()) {
            return Err(config("rotation angles must be finite"));
        }
        if self.test_indices().is_empty() {
            return Err(config("test rotation set has no angle outside the training set"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColoredMnistConfig {
    pub canvas: usize,
    /// Stroke sources per digit; procedural styles or IDX samples.
    pub sources_per_digit: usize,
    /// Leading sources used for training; the rest are test-only.
    pub train_sources: usize,
    pub palette: Palette,
    pub rotation: Option<RotationSets>,
    /// Extra stroke-width jitter (in pixels) keyed by the full factor tuple.
    pub thickness_jitter: f64,
    /// Directory holding `train-images-idx3-ubyte` / `train-labels-idx1-ubyte`.
    pub mnist_dir: Option<PathBuf>,
}

impl Default for ColoredMnistConfig {
    fn default() -> Self {
        Self {
            canvas: 28,
            sources_per_digit: 60,
            train_sources: 48,
            palette: Palette::default(),
            rotation: None,
            thickness_jitter: 0.0,
            mnist_dir: None,
        }
    }
}

pub const DIGIT: usize = 0;
pub const SOURCE: usize = 1;
pub const BACKGROUND: usize = 2;
pub const FOREGROUND: usize = 3;
pub const ANGLE: usize = 4;

/// Grayscale stroke masks indexed by `(digit, source)`.
#[derive(Clone, Debug)]
pub struct DigitBank {
    canvas: usize,
    masks: Vec<Vec<Array2<f64>>>,
    procedural: bool,
}

impl DigitBank {
    pub fn procedural(canvas: usize, per_digit: usize) -> Result<Self> {
        if canvas < 8 {
            return Err(config(format!("digit canvas {canvas} too small (< 8)")));
        }
        let masks = (0..10)
            .map(|d| {
                (0..per_digit)
                    .map(|s| render_glyph(d, s, canvas, 0.0))
                    .collect()
            })
            .collect();
        Ok(Self {
            canvas,
            masks,
            procedural: true,
        })
    }

    pub fn from_idx(dir: &Path, canvas: usize, per_digit: usize) -> Result<Self> {
        let images = read_idx(&dir.join("train-images-idx3-ubyte"))?;
        let labels = read_idx(&dir.join("train-labels-idx1-ubyte"))?;
        Self::from_idx_arrays(&images, &labels, canvas, per_digit)
    }

    fn from_idx_arrays(images: &IdxArray, labels: &IdxArray, canvas: usize, per_digit: usize) -> Result<Self> {
        if images.dims.len() != 3 || labels.dims.len() != 1 || images.dims[0] != labels.dims[0] {
            return Err(config("IDX image/label files have incompatible shapes"));
        }
        let (rows, cols) = (images.dims[1], images.dims[2]);
        let mut masks: Vec<Vec<Array2<f64>>> = vec![Vec::new(); 10];
        for (i, &label) in labels.data.iter().enumerate() {
            let d = label as usize;
            if d >= 10 || masks[d].len() >= per_digit {
                continue;
            }
            let px = &images.data[i * rows * cols..(i + 1) * rows * cols];
            let plane = Array2::from_shape_fn((rows, cols), |(y, x)| px[y * cols + x] as f64 / 255.0);
            masks[d].push(resize_plane(&plane, canvas));
            if masks.iter().all(|m| m.len() >= per_digit) {
                break;
            }
        }
        if let Some(d) = masks.iter().position(|m| m.len() < per_digit) {
            return Err(config(format!(
                "IDX data has only {} samples of digit {d}, need {per_digit}",
                masks[d].len()
            )));
        }
        Ok(Self {
            canvas,
            masks,
            procedural: false,
        })
    }

    pub fn mask(&self, digit: usize, source: usize) -> Result<&Array2<f64>> {
        self.masks
            .get(digit)
            .and_then(|m| m.get(source))
            .ok_or_else(|| argument(format!("no stroke source ({digit}, {source})")))
    }

    pub fn per_digit(&self) -> usize {
        self.masks[0].len()
    }
}

/// Renders colored digits from a [`DigitBank`].
#[derive(Clone, Debug)]
pub struct ColoredMnist {
    config: ColoredMnistConfig,
    bank: DigitBank,
    angles: Vec<f64>,
}

impl ColoredMnist {
    pub fn new(cfg: ColoredMnistConfig) -> Result<Self> {
        cfg.palette.validate()?;
        if cfg.train_sources == 0 || cfg.train_sources >= cfg.sources_per_digit {
            return Err(config_err_sources(&cfg));
        }
        if cfg.thickness_jitter < 0.0 || !cfg.thickness_jitter.is_finite() {
            return Err(config("thickness jitter must be finite and non-negative"));
        }
        let angles = match &cfg.rotation {
            Some(r) => {
                r.validate()?;
                r.angles()
            }
            None => Vec::new(),
        };
        let bank = match &cfg.mnist_dir {
            Some(dir) => DigitBank::from_idx(dir, cfg.canvas, cfg.sources_per_digit)?,
            None => DigitBank::procedural(cfg.canvas, cfg.sources_per_digit)?,
        };
        Ok(Self {
            config: cfg,
            bank,
            angles,
        })
    }

    pub fn config(&self) -> &ColoredMnistConfig {
        &self.config
    }

    pub fn spec(&self) -> FactorSpec {
        let p = &self.config.palette;
        let mut factors = vec![
            Factor::new("digit", 10),
            Factor::new("source", self.config.sources_per_digit),
            Factor::new("background", p.num_bg()),
            Factor::new("foreground", p.fg.len()),
        ];
        if !self.angles.is_empty() {
            factors.push(Factor::new("angle", self.angles.len()));
        }
        FactorSpec::new(factors, DIGIT, vec![BACKGROUND, FOREGROUND]).expect("valid digit spec")
    }

    /// Held-out test values: later stroke sources, test backgrounds and
    /// test-only angles.
    pub fn split_policy(&self) -> SplitPolicy {
        let p = &self.config.palette;
        let mut policy = SplitPolicy::default();
        policy
            .held_out
            .insert(SOURCE, (self.config.train_sources..self.config.sources_per_digit).collect());
        policy
            .held_out
            .insert(BACKGROUND, (p.bg_train.len()..p.num_bg()).collect());
        if let Some(r) = &self.config.rotation {
            policy.held_out.insert(ANGLE, r.test_indices());
        }
        policy
    }

    pub fn angle(&self, index: usize) -> Option<f64> {
        self.angles.get(index).copied()
    }

    pub fn into_grid(self) -> FactorGrid {
        let spec = self.spec();
        FactorGrid::new(spec, Arc::new(self))
    }

    /// Strokes of `(digit_id, source_index)` recolored to `fg` over a solid `bg`.
    pub fn render_colored_mnist(
        &self,
        digit_id: usize,
        source_index: usize,
        bg_color: usize,
        fg_color: usize,
    ) -> Result<Image> {
        self.render_full(digit_id, source_index, bg_color, fg_color, None)
    }

    fn render_full(
        &self,
        digit: usize,
        source: usize,
        bg: usize,
        fg: usize,
        angle: Option<usize>,
    ) -> Result<Image> {
        if digit >= 10 {
            return Err(argument(format!("digit id {digit} out of range")));
        }
        let bgc = self.config.palette.bg(bg)?;
        let fgc = self.config.palette.fg_color(fg)?;
        let jitter = self.config.thickness_jitter;
        let mut mask = if jitter > 0.0 && self.bank.procedural {
            let key = [digit, source, bg, fg, angle.unwrap_or(0)];
            let delta = jitter * (2.0 * unit_hash(&key) - 1.0);
            render_glyph(digit, source, self.bank.canvas, delta)
        } else {
            self.bank.mask(digit, source)?.clone()
        };
        if let Some(a) = angle {
            let deg = self
                .angle(a)
                .ok_or_else(|| config(format!("unknown angle index {a}")))?;
            mask = rotate_plane(&mask, deg);
        }
        Ok(colorize(&mask, fgc, bgc))
    }
}

fn config_err_sources(c: &ColoredMnistConfig) -> Error {
    config(format!(
        "train_sources ({}) must be in 1..{}",
        c.train_sources, c.sources_per_digit
    ))
}

impl Renderer for ColoredMnist {
    fn image_shape(&self) -> ImageShape {
        ImageShape::new(3, self.config.canvas, self.config.canvas)
    }

    fn render(&self, tuple: &[usize]) -> Image {
        self.render_full(
            tuple[DIGIT],
            tuple[SOURCE],
            tuple[BACKGROUND],
            tuple[FOREGROUND],
            tuple.get(ANGLE).copied(),
        )
        .expect("tuple validated against spec")
    }
}

/// `mask * fg + (1 - mask) * bg`, per channel.
pub fn colorize(mask: &Array2<f64>, fg: Rgb, bg: Rgb) -> Image {
    let (h, w) = mask.dim();
    Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        let m = mask[[y, x]].clamp(0.0, 1.0);
        m * fg[c] + (1.0 - m) * bg[c]
    })
}

/// Deterministic hash of a key to `[0, 1)`.
fn unit_hash(key: &[usize]) -> f64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &k in key {
        h ^= k as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
        h ^= h >> 29;
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, n: usize) -> Vec<(f64, f64)> {
    (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64 * std::f64::consts::TAU;
            (cx + rx * t.sin(), cy - ry * t.cos())
        })
        .collect()
}

/// Stroke skeletons in the unit square, y pointing down.
fn glyph_strokes(digit: usize) -> Vec<Vec<(f64, f64)>> {
    match digit {
        0 => vec![ellipse(0.5, 0.5, 0.27, 0.4, 16)],
        1 => vec![vec![(0.33, 0.27), (0.52, 0.1), (0.52, 0.9)]],
        2 => vec![vec![
            (0.25, 0.3),
            (0.35, 0.13),
            (0.6, 0.1),
            (0.75, 0.25),
            (0.7, 0.45),
            (0.25, 0.9),
            (0.8, 0.9),
        ]],
        3 => vec![vec![
            (0.25, 0.15),
            (0.72, 0.13),
            (0.45, 0.45),
            (0.7, 0.55),
            (0.73, 0.78),
            (0.52, 0.91),
            (0.24, 0.83),
        ]],
        4 => vec![vec![(0.65, 0.9), (0.65, 0.1), (0.2, 0.65), (0.82, 0.65)]],
        5 => vec![vec![
            (0.76, 0.12),
            (0.3, 0.12),
            (0.27, 0.45),
            (0.6, 0.42),
            (0.76, 0.62),
            (0.66, 0.86),
            (0.28, 0.88),
        ]],
        6 => vec![vec![
            (0.7, 0.1),
            (0.42, 0.28),
            (0.28, 0.58),
            (0.34, 0.85),
            (0.6, 0.9),
            (0.73, 0.7),
            (0.57, 0.52),
            (0.3, 0.6),
        ]],
        7 => vec![vec![(0.2, 0.13), (0.8, 0.13), (0.42, 0.9)]],
        8 => vec![
            ellipse(0.5, 0.29, 0.2, 0.18, 12),
            ellipse(0.5, 0.69, 0.25, 0.21, 12),
        ],
        _ => vec![
            ellipse(0.48, 0.32, 0.22, 0.2, 12),
            vec![(0.7, 0.32), (0.64, 0.9)],
        ],
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    (dx * dx + dy * dy).sqrt()
}

/// Draws a procedural handwriting-like glyph. `style` seeds slant, scale,
/// offset, stroke width and per-vertex jitter.
pub fn render_glyph(digit: usize, style: usize, canvas: usize, thickness_delta: f64) -> Array2<f64> {
    let seed = 0x5eed_d161_u64 ^ ((digit as u64) << 40) ^ (style as u64).wrapping_mul(0x9e37_79b9);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, 0.025).expect("valid normal");
    let slant: f64 = rng.random_range(-0.25..0.25);
    let sx: f64 = rng.random_range(0.8..1.05);
    let sy: f64 = rng.random_range(0.85..1.05);
    let ox: f64 = rng.random_range(-0.06..0.06);
    let oy: f64 = rng.random_range(-0.05..0.05);
    let scale = canvas as f64 / 28.0;
    let half_width = (rng.random_range(1.0..1.9) + thickness_delta).max(0.4) * scale;

    let strokes: Vec<Vec<(f64, f64)>> = glyph_strokes(digit)
        .into_iter()
        .map(|stroke| {
            stroke
                .into_iter()
                .map(|(x, y)| {
                    let qx = x - 0.5 + jitter.sample(&mut rng);
                    let qy = y - 0.5 + jitter.sample(&mut rng);
                    let tx = sx * (qx - slant * qy) + 0.5 + ox;
                    let ty = sy * qy + 0.5 + oy;
                    let c = canvas as f64;
                    ((0.14 + 0.72 * tx) * c, (0.12 + 0.76 * ty) * c)
                })
                .collect()
        })
        .collect();

    Array2::from_shape_fn((canvas, canvas), |(y, x)| {
        let p = (x as f64 + 0.5, y as f64 + 0.5);
        let mut d = f64::INFINITY;
        for stroke in &strokes {
            for seg in stroke.windows(2) {
                d = d.min(segment_distance(p, seg[0], seg[1]));
            }
        }
        (half_width - d + 0.5).clamp(0.0, 1.0)
    })
}

/// Bilinear resample of a plane to `size x size`.
pub fn resize_plane(plane: &Array2<f64>, size: usize) -> Array2<f64> {
    let (h, w) = plane.dim();
    if h == size && w == size {
        return plane.clone();
    }
    Array2::from_shape_fn((size, size), |(y, x)| {
        let sy = ((y as f64 + 0.5) * h as f64 / size as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let sx = ((x as f64 + 0.5) * w as f64 / size as f64 - 0.5).clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        (1.0 - fy) * ((1.0 - fx) * plane[[y0, x0]] + fx * plane[[y0, x1]])
            + fy * ((1.0 - fx) * plane[[y1, x0]] + fx * plane[[y1, x1]])
    })
}

/// Unsigned-byte IDX tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(config("not an IDX file"));
    }
    if bytes[2] != 0x08 {
        return Err(config(format!("unsupported IDX element type 0x{:02x}", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(config("truncated IDX header"));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| {
            let b = &bytes[4 + 4 * i..8 + 4 * i];
            u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize
        })
        .collect();
    let total: usize = dims.iter().product();
    if bytes.len() != header + total {
        return Err(config(format!(
            "IDX payload has {} bytes, header promises {total}",
            bytes.len() - header
        )));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    parse_idx(&fs::read(path)?)
}
