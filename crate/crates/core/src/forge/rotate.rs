use ndarray::{Array2, Array3, Axis};

use super::factors::Image;
use crate::error::{argument, Result};

/// Rotates a single plane counter-clockwise about its center with bilinear
/// interpolation. Samples falling outside the source are zero.
pub fn rotate_plane(plane: &Array2<f64>, angle_deg: f64) -> Array2<f64> {
    let (h, w) = plane.dim();
    let theta = angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let fetch = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            plane[[y as usize, x as usize]]
        }
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        // Inverse mapping: output pixel pulls from the source rotated back.
        let sx = cx + cos * dx - sin * dy;
        let sy = cy + sin * dx + cos * dy;
        let x0 = sx.floor();
        let y0 = sy.floor();
        let fx = sx - x0;
        let fy = sy - y0;
        let (x0, y0) = (x0 as isize, y0 as isize);
        let mut v = (1.0 - fx) * (1.0 - fy) * fetch(y0, x0);
        if fx != 0.0 {
            v += fx * (1.0 - fy) * fetch(y0, x0 + 1);
        }
        if fy != 0.0 {
            v += (1.0 - fx) * fy * fetch(y0 + 1, x0);
        }
        if fx != 0.0 && fy != 0.0 {
            v += fx * fy * fetch(y0 + 1, x0 + 1);
        }
        v
    })
}

/// Rotates every channel of `image` by `angle_deg` degrees.
pub fn render_rotated(image: &Image, angle_deg: f64) -> Result<Image> {
    if !angle_deg.is_finite() {
        return Err(argument(format!("rotation angle must be finite, got {angle_deg}")));
    }
    let (c, h, w) = image.dim();
    let mut out = Array3::zeros((c, h, w));
    for (src, mut dst) in image.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        dst.assign(&rotate_plane(&src.to_owned(), angle_deg));
    }
    Ok(out)
}
