use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use weakinv_core::attack::{default_grid, AttackConfig};
use weakinv_core::forge::{ColoredMnistConfig, Dataset, DatasetConfig, ShapesConfig, Side};
use weakinv_core::metrics::MetricSettings;
use weakinv_core::swap::CurriculumConfig;
use weakinv_core::trainer::TrainConfig;
use weakinv_core::vae::{LatentPartition, ModelConfig};

use crate::error::{ExpError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlotConfig {
    /// Use PCA instead of t-SNE for the embedding scatter.
    pub pca: bool,
    pub perplexity: f64,
    pub iterations: usize,
    /// Test rows embedded in the scatter plots (0 = all).
    pub max_points: usize,
    /// Rows in the reconstruction grid.
    pub recon_columns: usize,
}

impl Default for PlotConfig {
    fn default() -> Self {
        Self { pca: false, perplexity: 30.0, iterations: 500, max_points: 1000, recon_columns: 10 }
    }
}

/// Everything one run needs; serializes to a single JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    /// `image` and `num_classes` are overwritten from the dataset.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Rows per forward pass at evaluation time.
    pub eval_batch: usize,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
    pub metrics: MetricSettings,
    /// Split whose full factor grid feeds the disentanglement metrics.
    pub metrics_split: Side,
    pub attacks: Vec<AttackConfig>,
    /// Test rows attacked (0 = all).
    pub attack_samples: usize,
    pub plots: PlotConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::colored_mnist()
    }
}

impl RunConfig {
    /// Desk-scale Colored-MNIST: 16×16 canvas and a two-block conv encoder.
    pub fn colored_mnist() -> Self {
        let dataset = DatasetConfig::ColoredMnist(ColoredMnistConfig { canvas: 16, ..Default::default() });
        let model = ModelConfig {
            partition: LatentPartition::new(10, 2, 4).expect("valid partition"),
            conv_channels: vec![16, 32],
            encoder_hidden: vec![128],
            decoder_hidden: vec![128, 256],
            classifier_hidden: vec![64],
            projection_hidden: 32,
            projection_dim: 16,
            center_input: true,
            ..ModelConfig::default()
        };
        let train = TrainConfig {
            steps: 2000,
            pairs_per_batch: 32,
            pairs_fix_class: true,
            curriculum: CurriculumConfig { amount: true, difficulty: true, ramp_steps: 1000, k_max: 2 },
            ..TrainConfig::default()
        };
        Self::with(dataset, model, train)
    }

    /// Desk-scale shapes grid on a 32×32 canvas.
    pub fn shapes() -> Self {
        let dataset = DatasetConfig::Shapes(ShapesConfig { canvas: 32, ..Default::default() });
        let model = ModelConfig {
            partition: LatentPartition::new(2, 4, 2).expect("valid partition"),
            num_classes: 4,
            conv_channels: vec![16, 32, 32],
            encoder_hidden: vec![128],
            decoder_hidden: vec![128, 256],
            classifier_hidden: vec![32],
            projection_hidden: 32,
            projection_dim: 16,
            ..ModelConfig::default()
        };
        let train = TrainConfig {
            steps: 2000,
            pairs_per_batch: 32,
            curriculum: CurriculumConfig { amount: true, difficulty: true, ramp_steps: 1000, k_max: 2 },
            ..TrainConfig::default()
        };
        Self { metrics_split: Side::Train, ..Self::with(dataset, model, train) }
    }

    fn with(dataset: DatasetConfig, model: ModelConfig, train: TrainConfig) -> Self {
        Self {
            dataset,
            model,
            train,
            seed: 0,
            out_dir: PathBuf::from("runs"),
            eval_batch: 256,
            checkpoint_every: 0,
            metrics: MetricSettings::default(),
            metrics_split: Side::Train,
            attacks: default_grid(),
            attack_samples: 1000,
            plots: PlotConfig::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "colored_mnist" => Ok(Self::colored_mnist()),
            "rotation_colored_mnist" => {
                let mut c = Self::colored_mnist();
                if let DatasetConfig::ColoredMnist(d) = &mut c.dataset {
                    d.rotation = Some(Default::default());
                }
                Ok(c)
            }
            "shapes" => Ok(Self::shapes()),
            other => Err(ExpError::Config(format!(
                "unknown preset {other:?} (colored_mnist, rotation_colored_mnist, shapes)"
            ))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Model config with the dataset's image shape and class count filled in.
    pub fn resolved_model(&self, dataset: &Dataset) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        m.image = dataset.image_shape();
        m.num_classes = dataset.num_classes();
        let known = dataset.grid.spec().known_nuisance_indices().len();
        if m.partition.dim_nk != known {
            log::warn!("z_nk has {} dims but the dataset has {known} known nuisances", m.partition.dim_nk);
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.weights.validate()?;
        self.train.optimizer.validate()?;
        if self.eval_batch == 0 {
            return Err(ExpError::Config("eval_batch must be positive".into()));
        }
        for a in &self.attacks {
            a.validate()?;
        }
        Ok(())
    }

    pub fn ckpt_dir(&self) -> PathBuf {
        self.out_dir.join("ckpt")
    }

    pub fn logs_dir(&self) -> PathBuf {
        self.out_dir.join("logs")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.out_dir.join("reports")
    }

    pub fn figures_dir(&self) -> PathBuf {
        self.out_dir.join("figures")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        for name in ["colored_mnist", "rotation_colored_mnist", "shapes"] {
            let c = RunConfig::preset(name).unwrap();
            let back: RunConfig = serde_json::from_str(&c.to_json().unwrap()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn unknown_keys_rejected_and_missing_keys_defaulted() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"seed": 1, "bogus": 2}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"stepz": 3}}"#).is_err());
        let c: RunConfig = serde_json::from_str(r#"{"seed": 7}"#).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train, RunConfig::default().train);
    }

    #[test]
    fn unknown_preset() {
        assert!(RunConfig::preset("cifar").is_err());
    }
}
