use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::digits::{self, ColoredMnist, ColoredMnistConfig};
use super::factors::{FactorGrid, FactorSpec, FactorTuple, ImageShape};
use super::shapes::{self, ShapesConfig, ShapesRenderer};
use super::splits::{make_splits, Split, SplitPolicy};
use crate::error::{config, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CACHE_FILE: &str = "images.f32";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    ColoredMnist(ColoredMnistConfig),
    Shapes(ShapesConfig),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::ColoredMnist(ColoredMnistConfig::default())
    }
}

impl DatasetConfig {
    pub fn build(&self) -> Result<Dataset> {
        let (grid, policy, group_factor) = match self {
            DatasetConfig::ColoredMnist(c) => {
                let m = ColoredMnist::new(c.clone())?;
                let policy = m.split_policy();
                let group = if c.rotation.is_some() {
                    digits::ANGLE
                } else {
                    digits::BACKGROUND
                };
                (m.into_grid(), policy, group)
            }
            DatasetConfig::Shapes(c) => {
                let r = ShapesRenderer::new(c.clone())?;
                let policy = r.split_policy();
                (r.into_grid(), policy, shapes::COLOR)
            }
        };
        let (train, test) = make_splits(&grid, &policy)?;
        Ok(Dataset {
            config: self.clone(),
            grid,
            policy,
            train,
            test,
            group_factor,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetConfig::ColoredMnist(c) if c.rotation.is_some() => "rotation_colored_mnist",
            DatasetConfig::ColoredMnist(_) => "colored_mnist",
            DatasetConfig::Shapes(_) => "shapes",
        }
    }
}

/// A built dataset: grid, split policy and both splits.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub grid: FactorGrid,
    pub policy: SplitPolicy,
    pub train: Split,
    pub test: Split,
    /// Factor whose values define evaluation groups for worst-group accuracy.
    pub group_factor: usize,
}

impl Dataset {
    pub fn image_shape(&self) -> ImageShape {
        self.grid.image_shape()
    }

    pub fn num_classes(&self) -> usize {
        self.grid.spec().num_classes()
    }

    /// Renders tuples into rows of a `[N, C*H*W]` matrix.
    pub fn render_rows(&self, tuples: &[FactorTuple]) -> Result<Array2<f64>> {
        let len = self.image_shape().len();
        let mut out = Array2::zeros((tuples.len(), len));
        for (i, t) in tuples.iter().enumerate() {
            let img = self.grid.render(t)?;
            out.row_mut(i)
                .assign(&ndarray::ArrayView1::from(img.as_slice().expect("standard layout")));
        }
        Ok(out)
    }

    pub fn labels(&self, tuples: &[FactorTuple]) -> Vec<usize> {
        tuples.iter().map(|t| self.grid.label(t)).collect()
    }
}

/// On-disk description of a materialized dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub dataset: DatasetConfig,
    pub factor_spec: FactorSpec,
    pub image_shape: ImageShape,
    pub split_policy: SplitPolicy,
    pub seed: u64,
    pub train: Vec<FactorTuple>,
    pub test: Vec<FactorTuple>,
    /// Present when images were cached; rows follow `train` then `test`.
    pub cache: Option<String>,
}

impl DatasetManifest {
    pub fn new(dataset: &Dataset, seed: u64) -> Self {
        Self {
            format_version: 1,
            dataset: dataset.config.clone(),
            factor_spec: dataset.grid.spec().clone(),
            image_shape: dataset.image_shape(),
            split_policy: dataset.policy.clone(),
            seed,
            train: dataset.train.tuples(),
            test: dataset.test.tuples(),
            cache: None,
        }
    }

    /// Writes the manifest and, if requested, an `f32` little-endian image
    /// cache to `dir`.
    pub fn write(mut self, dir: &Path, dataset: &Dataset, cache: bool) -> Result<Self> {
        fs::create_dir_all(dir)?;
        if cache {
            let mut w = BufWriter::new(File::create(dir.join(CACHE_FILE))?);
            for t in self.train.iter().chain(&self.test) {
                for v in dataset.grid.render(t)?.iter() {
                    w.write_all(&(*v as f32).to_le_bytes())?;
                }
            }
            w.flush()?;
            self.cache = Some(CACHE_FILE.to_string());
        }
        let json = serde_json::to_string_pretty(&self)?;
        fs::write(dir.join(MANIFEST_FILE), json)?;
        Ok(self)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.format_version != 1 {
            return Err(config(format!("unsupported manifest version {}", m.format_version)));
        }
        Ok(m)
    }

    /// Reads cached rows `[train.len() + test.len(), C*H*W]`.
    pub fn read_cache(&self, dir: &Path) -> Result<Option<Array2<f32>>> {
        let Some(file) = &self.cache else {
            return Ok(None);
        };
        let mut bytes = Vec::new();
        File::open(dir.join(file))?.read_to_end(&mut bytes)?;
        let rows = self.train.len() + self.test.len();
        let len = self.image_shape.len();
        if bytes.len() != rows * len * 4 {
            return Err(config("image cache size does not match manifest"));
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Some(Array2::from_shape_vec((rows, len), data).expect("checked size")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips_with_cache() {
        let cfg = DatasetConfig::Shapes(ShapesConfig {
            canvas: 16,
            colors: 4,
            held_out_colors: 2,
            pos_x: 3,
            pos_y: 3,
            scales: 2,
            min_radius: 0.1,
            max_radius: 0.2,
            ..Default::default()
        });
        let ds = cfg.build().unwrap();
        let dir = std::env::temp_dir().join(format!("weakinv-manifest-{}", std::process::id()));
        let written = DatasetManifest::new(&ds, 7).write(&dir, &ds, true).unwrap();
        let back = DatasetManifest::read(&dir).unwrap();
        assert_eq!(back, written);
        assert_eq!(back.train.len(), 4 * 2 * 2 * 3 * 3);
        let cache = back.read_cache(&dir).unwrap().unwrap();
        let img = ds.grid.render(&back.test[3]).unwrap();
        let row = cache.row(back.train.len() + 3);
        for (a, b) in img.iter().zip(row.iter()) {
            assert_eq!(*a as f32, *b);
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = r#"{"kind":"shapes","canvas":32,"bogus":1}"#;
        assert!(serde_json::from_str::<DatasetConfig>(bad).is_err());
        let ok = r#"{"kind":"shapes","canvas":32}"#;
        assert!(serde_json::from_str::<DatasetConfig>(ok).is_ok());
    }
}
