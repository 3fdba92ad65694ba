//! Trainer configuration and its flat TOML form.

use std::path::{Path, PathBuf};

use gwa_core::projection::ProjectionConfig;
use serde::{Deserialize, Serialize};

use crate::error::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ModelKind {
    SoftmaxRegression,
    Mlp {
        hidden_dim: usize,
        activation: Activation,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Sgd {
        lr: f64,
        momentum: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerKind {
    pub fn lr(&self) -> f64 {
        match *self {
            Self::Sgd { lr, .. } | Self::Adam { lr, .. } => lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DatasetSpec {
    /// Isotropic unit-variance Gaussian clusters around random centers
    /// whose coordinates are drawn with standard deviation `separation`.
    /// `center_shift` moves every center by the same vector (fine-tuning
    /// on a shifted domain); `center_seed` fixes the centers independently
    /// of the sampling seed.
    GaussianBlobs {
        classes: usize,
        dim: usize,
        separation: f64,
        samples: usize,
        center_seed: Option<u64>,
        center_shift: f64,
    },
    TwoMoons {
        samples: usize,
        noise: f64,
    },
    /// Numeric CSV, integer class label in the last column. A header line
    /// is skipped when it does not parse.
    CsvDataset {
        path: PathBuf,
    },
    /// IDX image and label files; `subsample` keeps the first n images.
    IdxImages {
        path: PathBuf,
        labels_path: PathBuf,
        subsample: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub model: ModelKind,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub label_noise_fraction: f64,
    pub random_labels: bool,
    pub dataset: DatasetSpec,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Standard deviation of the initial weights relative to 1/√fan_in.
    pub init_scale: f64,
    pub include_bias: bool,
    pub beta: f64,
    pub warmup_fraction: f64,
    pub projection: ProjectionConfig,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        FlatConfig::default()
            .into_config()
            .expect("default flat config is valid")
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.optimizer.lr().is_nan() || self.optimizer.lr() <= 0.0 {
            return bad("learning rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.label_noise_fraction) {
            return bad("label_noise_fraction must lie in [0, 1]");
        }
        if self.random_labels && self.label_noise_fraction > 0.0 {
            return bad("label_noise_fraction and random_labels are mutually exclusive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction)
            || !(0.0..1.0).contains(&self.test_fraction)
            || self.val_fraction + self.test_fraction >= 1.0
        {
            return bad("val_fraction + test_fraction must be below 1");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1)");
        }
        if let ModelKind::Mlp { hidden_dim: 0, .. } = self.model {
            return bad("hidden_dim must be positive");
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self, HarnessError> {
        let flat: FlatConfig =
            toml::from_str(s).map_err(|e| HarnessError::Config(e.to_string()))?;
        flat.into_config()
    }

    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        // Relative dataset paths are resolved against the config file.
        if let Some(dir) = path.parent() {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            };
            match &mut cfg.dataset {
                DatasetSpec::CsvDataset { path } => fix(path),
                DatasetSpec::IdxImages {
                    path, labels_path, ..
                } => {
                    fix(path);
                    fix(labels_path);
                }
                _ => {}
            }
        }
        Ok(cfg)
    }
}

/// The key-value document accepted by `gwa train --config`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlatConfig {
    pub model: String,
    pub hidden_dim: usize,
    pub activation: Activation,
    pub optimizer: String,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub label_noise_fraction: f64,
    pub random_labels: bool,
    pub dataset: String,
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub samples: usize,
    pub center_seed: Option<u64>,
    pub center_shift: f64,
    pub noise: f64,
    pub path: Option<PathBuf>,
    pub labels_path: Option<PathBuf>,
    pub subsample: Option<usize>,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub init_scale: f64,
    pub include_bias: bool,
    pub beta: f64,
    pub warmup_fraction: f64,
    pub out_dir: Option<PathBuf>,
    pub projection: ProjectionConfig,
}

impl Default for FlatConfig {
    fn default() -> Self {
        Self {
            model: "mlp".into(),
            hidden_dim: 64,
            activation: Activation::Relu,
            optimizer: "sgd".into(),
            lr: 0.01,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            label_noise_fraction: 0.0,
            random_labels: false,
            dataset: "blobs".into(),
            classes: 4,
            dim: 16,
            separation: 2.0,
            samples: 2000,
            center_seed: None,
            center_shift: 0.0,
            noise: 0.1,
            path: None,
            labels_path: None,
            subsample: None,
            val_fraction: 0.2,
            test_fraction: 0.2,
            init_scale: 1.0,
            include_bias: false,
            beta: gwa_core::moments::DEFAULT_BETA,
            warmup_fraction: gwa_core::controller::DEFAULT_WARMUP_FRACTION,
            out_dir: None,
            projection: ProjectionConfig::default(),
        }
    }
}

impl FlatConfig {
    pub fn into_config(self) -> Result<TrainerConfig, HarnessError> {
        let cfg_err = |m: String| HarnessError::Config(m);
        let model = match self.model.as_str() {
            "softmax_regression" | "softmax" | "linear" => ModelKind::SoftmaxRegression,
            "mlp" => ModelKind::Mlp {
                hidden_dim: self.hidden_dim,
                activation: self.activation,
            },
            other => return Err(cfg_err(format!("unknown model `{other}`"))),
        };
        let optimizer = match self.optimizer.as_str() {
            "sgd" => OptimizerKind::Sgd {
                lr: self.lr,
                momentum: self.momentum,
            },
            "adam" => OptimizerKind::Adam {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            },
            other => return Err(cfg_err(format!("unknown optimizer `{other}`"))),
        };
        let need = |p: Option<PathBuf>, key: &str| {
            p.ok_or_else(|| cfg_err(format!("dataset `{}` needs `{key}`", self.dataset)))
        };
        let dataset = match self.dataset.as_str() {
            "blobs" | "gaussian_blobs" => DatasetSpec::GaussianBlobs {
                classes: self.classes,
                dim: self.dim,
                separation: self.separation,
                samples: self.samples,
                center_seed: self.center_seed,
                center_shift: self.center_shift,
            },
            "two_moons" | "moons" => DatasetSpec::TwoMoons {
                samples: self.samples,
                noise: self.noise,
            },
            "csv" => DatasetSpec::CsvDataset {
                path: need(self.path.clone(), "path")?,
            },
            "idx" | "idx_images" => DatasetSpec::IdxImages {
                path: need(self.path.clone(), "path")?,
                labels_path: need(self.labels_path.clone(), "labels_path")?,
                subsample: self.subsample,
            },
            other => return Err(cfg_err(format!("unknown dataset `{other}`"))),
        };
        let cfg = TrainerConfig {
            model,
            optimizer,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            label_noise_fraction: self.label_noise_fraction,
            random_labels: self.random_labels,
            dataset,
            val_fraction: self.val_fraction,
            test_fraction: self.test_fraction,
            init_scale: self.init_scale,
            include_bias: self.include_bias,
            beta: self.beta,
            warmup_fraction: self.warmup_fraction,
            projection: self.projection,
            out_dir: self.out_dir,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
