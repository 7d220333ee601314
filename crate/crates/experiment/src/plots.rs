//! Embedding scatters, latent-response heatmaps and reconstruction grids.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use weakinv_core::forge::{Dataset, FactorTuple, ImageShape};
use weakinv_core::swap::{pairwise_divergence, select_keep_set, swap_latents, DivergenceConfig};
use weakinv_core::tape::Mat;
use weakinv_core::vae::{standard_normal, Vae};

use crate::config::PlotConfig;
use crate::error::Result;
use crate::run::encode_means;

/// Top-two principal component scores.
pub fn pca_2d(x: &Mat) -> Mat {
    let n = x.nrows();
    let mean = x.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let centered = x - &mean;
    let mut cov = centered.t().dot(&centered) / n.max(1) as f64;
    let d = x.ncols();
    let mut out = Array2::zeros((n, 2));
    for c in 0..2.min(d) {
        let mut v = ndarray::Array1::from_shape_fn(d, |i| 1.0 + i as f64 * 1e-3);
        for _ in 0..500 {
            let next = cov.dot(&v);
            let norm = next.dot(&next).sqrt();
            if norm <= 1e-300 {
                break;
            }
            v = next / norm;
        }
        let lambda = v.dot(&cov.dot(&v));
        out.column_mut(c).assign(&centered.dot(&v));
        let outer = Array2::from_shape_fn((d, d), |(i, j)| lambda * v[i] * v[j]);
        cov -= &outer;
    }
    out
}

fn row_affinities(dist: &[f64], i: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let (mut lo, mut hi, mut beta) = (0.0, f64::INFINITY, 1.0);
    let mut p = vec![0.0; dist.len()];
    for _ in 0..64 {
        let mut sum = 0.0;
        for (j, d) in dist.iter().enumerate() {
            p[j] = if j == i { 0.0 } else { (-beta * d).exp() };
            sum += p[j];
        }
        if sum <= 0.0 {
            hi = beta;
            beta = 0.5 * (lo + hi);
            continue;
        }
        let mut h = 0.0;
        for (j, d) in dist.iter().enumerate() {
            if j != i {
                p[j] /= sum;
                h += beta * d * p[j];
            }
        }
        h += sum.ln();
        if (h - target).abs() < 1e-5 {
            break;
        }
        if h > target {
            lo = beta;
            beta = if hi.is_finite() { 0.5 * (lo + hi) } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = 0.5 * (lo + hi);
        }
    }
    p
}

/// Exact t-SNE with early exaggeration and momentum; deterministic given `seed`.
pub fn tsne_2d(x: &Mat, perplexity: f64, iterations: usize, seed: u64) -> Mat {
    let n = x.nrows();
    if n < 3 {
        return pca_2d(x);
    }
    let perplexity = perplexity.min((n - 1) as f64 / 3.0).max(1.0);
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let dist: Vec<f64> = (0..n)
            .map(|j| x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b).powi(2)).sum())
            .collect();
        let row = row_affinities(&dist, i, perplexity);
        p[i * n..(i + 1) * n].copy_from_slice(&row);
    }
    for i in 0..n {
        for j in i + 1..n {
            let v = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
            p[i * n + j] = v;
            p[j * n + i] = v;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = standard_normal((n, 2), &mut rng) * 1e-4;
    let mut vel = Array2::<f64>::zeros((n, 2));
    let lr = 200.0;
    let mut q = vec![0.0; n * n];
    for it in 0..iterations {
        let exaggeration = if it < 100 { 12.0 } else { 1.0 };
        let momentum = if it < 250 { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let d = (y[[i, 0]] - y[[j, 0]]).powi(2) + (y[[i, 1]] - y[[j, 1]]).powi(2);
                    q[i * n + j] = 1.0 / (1.0 + d);
                    z += q[i * n + j];
                }
            }
        }
        let mut grad = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let w = q[i * n + j];
                    let m = 4.0 * (exaggeration * p[i * n + j] - w / z) * w;
                    grad[[i, 0]] += m * (y[[i, 0]] - y[[j, 0]]);
                    grad[[i, 1]] += m * (y[[i, 1]] - y[[j, 1]]);
                }
            }
        }
        vel = vel * momentum - grad * lr;
        y += &vel;
        let mean = y.mean_axis(ndarray::Axis(0)).expect("non-empty");
        y -= &mean;
    }
    y
}

fn hue(i: usize, n: usize) -> Rgb<u8> {
    let h = i as f64 / n.max(1) as f64 * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    Rgb([(r * 220.0) as u8, (g * 220.0) as u8, (b * 220.0) as u8])
}

/// Scatter of 2-D points colored by label; returns the number of points drawn.
pub fn scatter_png(points: &Mat, labels: &[usize], path: &Path) -> Result<usize> {
    let size = 512u32;
    let margin = 16.0;
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let span = |c: usize| {
        let col = points.column(c);
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, (hi - lo).max(1e-12))
    };
    let (x0, xs) = span(0);
    let (y0, ys) = span(1);
    let classes: BTreeSet<usize> = labels.iter().copied().collect();
    let classes: Vec<usize> = classes.into_iter().collect();
    let inner = size as f64 - 2.0 * margin;
    for (p, &l) in points.rows().into_iter().zip(labels) {
        let px = margin + (p[0] - x0) / xs * inner;
        let py = margin + (1.0 - (p[1] - y0) / ys) * inner;
        let color = hue(classes.binary_search(&l).unwrap_or(0), classes.len());
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (x, y) = (px as i64 + dx, py as i64 + dy);
                if x >= 0 && y >= 0 && (x as u32) < size && (y as u32) < size {
                    img.put_pixel(x as u32, y as u32, color);
                }
            }
        }
    }
    img.save(path)?;
    Ok(points.nrows())
}

fn viridis_like(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    let r = (0.27 + t * (0.99 - 0.27)) * 255.0 * t.powf(0.6).max(0.2);
    let g = (0.0 + t * 0.9 + 0.05) * 255.0;
    let b = (0.33 + (1.0 - t) * 0.4) * 255.0;
    Rgb([r.min(255.0) as u8, g.min(255.0) as u8, b.min(255.0) as u8])
}

/// Cell-per-value heatmap normalized by the matrix maximum.
pub fn heatmap_png(values: &Mat, path: &Path) -> Result<()> {
    let cell = 24u32;
    let (r, c) = values.dim();
    let max = values.iter().copied().fold(0.0, f64::max).max(1e-12);
    let mut img = RgbImage::new(c as u32 * cell, r as u32 * cell);
    for ((i, j), v) in values.indexed_iter() {
        let color = viridis_like(v / max);
        for y in 0..cell {
            for x in 0..cell {
                img.put_pixel(j as u32 * cell + x, i as u32 * cell + y, color);
            }
        }
    }
    img.save(path)?;
    Ok(())
}

/// Grid of image rows (`rows[k]` is one grid row of flat images), upscaled by `scale`.
pub fn image_grid_png(rows: &[Mat], shape: ImageShape, scale: u32, path: &Path) -> Result<()> {
    let (h, w) = (shape.height as u32, shape.width as u32);
    let cols = rows.iter().map(|r| r.nrows()).max().unwrap_or(0) as u32;
    let pad = 2u32;
    let cw = w * scale + pad;
    let ch = h * scale + pad;
    let mut img = RgbImage::from_pixel(cols * cw + pad, rows.len() as u32 * ch + pad, Rgb([40, 40, 40]));
    let plane = shape.height * shape.width;
    for (ri, row) in rows.iter().enumerate() {
        for (ci, flat) in row.rows().into_iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let idx = (y * w + x) as usize;
                    let px = |c: usize| {
                        let c = if shape.channels == 1 { 0 } else { c };
                        (flat[c * plane + idx].clamp(0.0, 1.0) * 255.0).round() as u8
                    };
                    let color = Rgb([px(0), px(1), px(2)]);
                    for sy in 0..scale {
                        for sx in 0..scale {
                            img.put_pixel(
                                pad + ci as u32 * cw + x * scale + sx,
                                pad + ri as u32 * ch + y * scale + sy,
                                color,
                            );
                        }
                    }
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}

fn evenly_spaced<T: Clone>(items: &[T], n: usize) -> Vec<T> {
    if n == 0 || n >= items.len() {
        return items.to_vec();
    }
    (0..n).map(|i| items[i * items.len() / n].clone()).collect()
}

/// Mean `|Δμ|` per latent dim when one factor of each base tuple moves to
/// another value allowed in the split.
pub fn latent_response(model: &Vae, dataset: &Dataset, bases: &[FactorTuple], factor: usize) -> Result<Vec<f64>> {
    let domain = &dataset.test.domain[factor];
    let mut changed = Vec::with_capacity(bases.len());
    for (i, t) in bases.iter().enumerate() {
        let pos = domain.iter().position(|v| *v == t[factor]).unwrap_or(0);
        let mut c = t.clone();
        c[factor] = domain[(pos + 1 + i % (domain.len() - 1).max(1)) % domain.len()];
        changed.push(c);
    }
    let a = encode_means(model, &dataset.render_rows(bases)?, 256)?;
    let b = encode_means(model, &dataset.render_rows(&changed)?, 256)?;
    let diff = (&a - &b).mapv(f64::abs);
    Ok(diff.mean_axis(ndarray::Axis(0)).expect("non-empty").to_vec())
}

#[derive(Clone, Debug)]
pub struct PlotFiles {
    pub embeddings: Vec<PathBuf>,
    /// Points drawn per embedding plot.
    pub points: usize,
    pub heatmaps: Vec<PathBuf>,
    pub reconstruction: PathBuf,
}

/// Writes the embedding scatters of `z_p` and `z_nu` (colored by the group
/// factor), per-factor latent-response heatmaps and the reconstruction grid.
pub fn export_plots(model: &Vae, dataset: &Dataset, cfg: &PlotConfig, seed: u64, dir: &Path) -> Result<PlotFiles> {
    fs::create_dir_all(dir)?;
    let part = model.partition();
    let tuples = evenly_spaced(&dataset.test.tuples(), cfg.max_points);
    let x = dataset.render_rows(&tuples)?;
    let mu = encode_means(model, &x, 256)?;
    let groups: Vec<usize> = tuples.iter().map(|t| t[dataset.group_factor]).collect();
    let mut embeddings = Vec::new();
    for (name, range) in [("z_p", part.p_range()), ("z_nu", part.nu_range())] {
        let slice = mu.slice(s![.., range]).to_owned();
        let emb = if cfg.pca { pca_2d(&slice) } else { tsne_2d(&slice, cfg.perplexity, cfg.iterations, seed) };
        let path = dir.join(format!("embedding_{name}.png"));
        scatter_png(&emb, &groups, &path)?;
        let mut csv = String::from("x,y,group\n");
        for (p, g) in emb.rows().into_iter().zip(&groups) {
            let _ = writeln!(csv, "{},{},{g}", p[0], p[1]);
        }
        fs::write(dir.join(format!("embedding_{name}.csv")), csv)?;
        embeddings.push(path);
    }

    let spec = dataset.grid.spec();
    let mut probe_factors = spec.known_nuisance_indices().to_vec();
    probe_factors.push(spec.predictive_index());
    let bases = evenly_spaced(&dataset.test.tuples(), 64);
    let mut heatmaps = Vec::new();
    let mut all = Vec::new();
    for &f in &probe_factors {
        if dataset.test.domain[f].len() < 2 {
            continue;
        }
        let resp = latent_response(model, dataset, &bases, f)?;
        let name = &spec.factors()[f].name;
        let path = dir.join(format!("heatmap_{name}.png"));
        heatmap_png(&Array2::from_shape_vec((1, resp.len()), resp.clone()).expect("row"), &path)?;
        heatmaps.push(path);
        all.extend(resp);
    }
    let rows = all.len() / part.d_z();
    if rows > 0 {
        let path = dir.join("heatmap_all.png");
        heatmap_png(&Array2::from_shape_vec((rows, part.d_z()), all).expect("rows"), &path)?;
        heatmaps.push(path);
    }

    // originals, reconstructions, post-swap, decode([rand z_p, z_n]), decode([z_p, rand z_n])
    let recon_tuples = evenly_spaced(&dataset.test.tuples(), cfg.recon_columns.max(2));
    let xr = dataset.render_rows(&recon_tuples)?;
    let code = model.encode(&xr)?;
    let n = recon_tuples.len();
    let mut swapped = code.mu.clone();
    for i in 0..n {
        let j = (i + 1) % n;
        let (l, m) = (code.row(i), code.row(j));
        let div = pairwise_divergence(&l, &m, DivergenceConfig::default())?;
        let differing = recon_tuples[i].iter().zip(&recon_tuples[j]).filter(|(a, b)| a != b).count();
        let k = differing.min(part.dim_n());
        let plan = select_keep_set(&div[part.n_range()], k, None, &part)?;
        let (hat_l, _) = swap_latents(&l, &m, &plan)?;
        swapped.row_mut(i).assign(&ndarray::ArrayView1::from(&hat_l.mu));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = standard_normal((n, part.d_z()), &mut rng);
    let mut rand_p = code.mu.clone();
    let mut rand_n = code.mu.clone();
    rand_p.slice_mut(s![.., part.p_range()]).assign(&noise.slice(s![.., part.p_range()]));
    rand_n.slice_mut(s![.., part.n_range()]).assign(&noise.slice(s![.., part.n_range()]));
    let grid = vec![xr, model.decode(&code.mu)?, model.decode(&swapped)?, model.decode(&rand_p)?, model.decode(&rand_n)?];
    let reconstruction = dir.join("reconstructions.png");
    image_grid_png(&grid, dataset.image_shape(), 3, &reconstruction)?;
    Ok(PlotFiles { embeddings, points: tuples.len(), heatmaps, reconstruction })
}
