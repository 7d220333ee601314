//! Procedural factorized shapes: a desk-scale stand-in for 3D-shapes style
//! benchmarks. Factors are shape, color, scale and 2-D position; the
//! background is black so color changes touch only foreground pixels.

use std::sync::Arc;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::factors::{Factor, FactorGrid, FactorSpec, Image, ImageShape, Renderer};
use super::splits::SplitPolicy;
use crate::error::{config, Result};

pub const SHAPE: usize = 0;
pub const COLOR: usize = 1;
pub const SCALE: usize = 2;
pub const POS_X: usize = 3;
pub const POS_Y: usize = 4;

const SUPERSAMPLE: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapesConfig {
    pub canvas: usize,
    pub shapes: usize,
    pub colors: usize,
    pub scales: usize,
    pub pos_x: usize,
    pub pos_y: usize,
    /// Smallest and largest shape radius as a fraction of the canvas.
    pub min_radius: f64,
    pub max_radius: f64,
    /// Number of colors held out for the test split (taken from the top).
    pub held_out_colors: usize,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            canvas: 64,
            shapes: 4,
            colors: 8,
            scales: 4,
            pos_x: 8,
            pos_y: 8,
            min_radius: 0.07,
            max_radius: 0.14,
            held_out_colors: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ShapesRenderer {
    config: ShapesConfig,
    palette: Vec<[f64; 3]>,
}

/// Fully saturated hues evenly spaced around the color wheel.
fn hue_palette(n: usize) -> Vec<[f64; 3]> {
    (0..n)
        .map(|i| {
            let h = i as f64 / n as f64 * 6.0;
            let x = 1.0 - ((h % 2.0) - 1.0).abs();
            match h as usize {
                0 => [1.0, x, 0.0],
                1 => [x, 1.0, 0.0],
                2 => [0.0, 1.0, x],
                3 => [0.0, x, 1.0],
                4 => [x, 0.0, 1.0],
                _ => [1.0, 0.0, x],
            }
        })
        .collect()
}

impl ShapesRenderer {
    pub fn new(cfg: ShapesConfig) -> Result<Self> {
        if cfg.shapes < 2 || cfg.shapes > 4 {
            return Err(config_err("shapes must be in 2..=4"));
        }
        for (name, n) in [
            ("colors", cfg.colors),
            ("scales", cfg.scales),
            ("pos_x", cfg.pos_x),
            ("pos_y", cfg.pos_y),
        ] {
            if n < 2 {
                return Err(config_err(&format!("{name} must be at least 2")));
            }
        }
        if !(0.0 < cfg.min_radius && cfg.min_radius < cfg.max_radius && cfg.max_radius < 0.5) {
            return Err(config_err("radii must satisfy 0 < min < max < 0.5"));
        }
        if cfg.held_out_colors >= cfg.colors {
            return Err(config_err("cannot hold out every color"));
        }
        let c = cfg.canvas as f64;
        let r_max = cfg.max_radius * c;
        let margin = r_max.ceil() + 1.0;
        let span = c - 2.0 * margin;
        let steps = (cfg.pos_x.max(cfg.pos_y) - 1) as f64;
        let min_radius_px = cfg.min_radius * c;
        let radius_step = (cfg.max_radius - cfg.min_radius) * c / (cfg.scales - 1) as f64;
        if span < steps || min_radius_px < 1.0 || radius_step < 0.25 {
            return Err(config(format!(
                "canvas {} too small for max scale {:.2} with {} positions",
                cfg.canvas, cfg.max_radius, cfg.pos_x.max(cfg.pos_y)
            )));
        }
        let palette = hue_palette(cfg.colors);
        Ok(Self { config: cfg, palette })
    }

    pub fn config(&self) -> &ShapesConfig {
        &self.config
    }

    pub fn spec(&self) -> FactorSpec {
        let c = &self.config;
        FactorSpec::new(
            vec![
                Factor::new("shape", c.shapes),
                Factor::new("color", c.colors),
                Factor::new("scale", c.scales),
                Factor::new("pos_x", c.pos_x),
                Factor::new("pos_y", c.pos_y),
            ],
            SHAPE,
            vec![COLOR, SCALE, POS_X, POS_Y],
        )
        .expect("valid shapes spec")
    }

    /// Upper `held_out_colors` colors go to the test split.
    pub fn split_policy(&self) -> SplitPolicy {
        let mut policy = SplitPolicy::default();
        if self.config.held_out_colors > 0 {
            let c = self.config.colors;
            policy
                .held_out
                .insert(COLOR, (c - self.config.held_out_colors..c).collect());
        }
        policy
    }

    pub fn into_grid(self) -> FactorGrid {
        let spec = self.spec();
        FactorGrid::new(spec, Arc::new(self))
    }

    fn geometry(&self, tuple: &[usize]) -> (f64, f64, f64) {
        let c = &self.config;
        let canvas = c.canvas as f64;
        let r_max = c.max_radius * canvas;
        let margin = r_max.ceil() + 1.0;
        let span = canvas - 2.0 * margin;
        let radius = (c.min_radius + (c.max_radius - c.min_radius) * tuple[SCALE] as f64 / (c.scales - 1) as f64) * canvas;
        let cx = margin + span * tuple[POS_X] as f64 / (c.pos_x - 1) as f64;
        let cy = margin + span * tuple[POS_Y] as f64 / (c.pos_y - 1) as f64;
        (cx, cy, radius)
    }
}

fn config_err(msg: &str) -> crate::error::Error {
    config(msg.to_string())
}

/// Inside test for a shape centered at the origin with radius `r`.
fn inside(shape: usize, x: f64, y: f64, r: f64) -> bool {
    match shape {
        // square
        0 => x.abs() <= r * 0.85 && y.abs() <= r * 0.85,
        // disc
        1 => x * x + y * y <= r * r,
        // upward triangle
        2 => {
            let top = -r;
            let bottom = r * 0.75;
            if y < top || y > bottom {
                return false;
            }
            let half = (y - top) / (bottom - top) * r;
            x.abs() <= half
        }
        // plus sign
        _ => {
            let arm = r * 0.35;
            (x.abs() <= arm && y.abs() <= r) || (y.abs() <= arm && x.abs() <= r)
        }
    }
}

impl Renderer for ShapesRenderer {
    fn image_shape(&self) -> ImageShape {
        ImageShape::new(3, self.config.canvas, self.config.canvas)
    }

    fn render(&self, tuple: &[usize]) -> Image {
        let n = self.config.canvas;
        let (cx, cy, r) = self.geometry(tuple);
        let color = self.palette[tuple[COLOR]];
        let shape = tuple[SHAPE];
        let mut img = Array3::zeros((3, n, n));
        let sub = SUPERSAMPLE as f64;
        let x_lo = ((cx - r - 1.0).floor().max(0.0)) as usize;
        let x_hi = ((cx + r + 1.0).ceil() as usize).min(n);
        let y_lo = ((cy - r - 1.0).floor().max(0.0)) as usize;
        let y_hi = ((cy + r + 1.0).ceil() as usize).min(n);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let mut hits = 0usize;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 + (sx as f64 + 0.5) / sub - cx;
                        let py = y as f64 + (sy as f64 + 0.5) / sub - cy;
                        if inside(shape, px, py, r) {
                            hits += 1;
                        }
                    }
                }
                if hits > 0 {
                    let coverage = hits as f64 / (sub * sub);
                    for ch in 0..3 {
                        img[[ch, y, x]] = coverage * color[ch];
                    }
                }
            }
        }
        img
    }
}

/// Builds the shapes grid described by `config`.
pub fn synth_shapes_grid(config: ShapesConfig) -> Result<FactorGrid> {
    Ok(ShapesRenderer::new(config)?.into_grid())
}
