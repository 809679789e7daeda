//! Run configuration: a strict JSON document with defaults for everything
//! except the mode and dataset. Unknown keys are rejected by name.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Fediod,
    Fedavg,
    Standalone,
    Centralized,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Mode::Fediod => "fediod",
            Mode::Fedavg => "fedavg",
            Mode::Standalone => "standalone",
            Mode::Centralized => "centralized",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Blobs {
        #[serde(default = "defaults::classes")]
        classes: usize,
        #[serde(default = "defaults::per_class")]
        per_class: usize,
        #[serde(default = "defaults::dim")]
        dim: usize,
        #[serde(default = "defaults::spread")]
        spread: f64,
        #[serde(default = "defaults::test_fraction")]
        test_fraction: f64,
    },
    Idx {
        images: String,
        labels: String,
        #[serde(default = "defaults::downsample_to")]
        downsample_to: usize,
        #[serde(default = "defaults::test_fraction")]
        test_fraction: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// Hidden layer widths; input/output sizes come from the dataset.
    #[serde(default = "defaults::task_hidden")]
    pub teacher_hidden: Vec<usize>,
    /// Optional per-node override, one hidden-layer list per node.
    #[serde(default)]
    pub teacher_hidden_per_node: Option<Vec<Vec<usize>>>,
    #[serde(default = "defaults::task_hidden")]
    pub student_hidden: Vec<usize>,
    #[serde(default = "defaults::generator_hidden")]
    pub generator_hidden: Vec<usize>,
    #[serde(default = "defaults::noise_dim")]
    pub noise_dim: usize,
    #[serde(default = "defaults::disc_hidden")]
    pub disc_hidden: Vec<usize>,
    /// Discriminators emit a `patch_grid^2` patch score grid.
    #[serde(default = "defaults::patch_grid")]
    pub patch_grid: usize,
    #[serde(default = "defaults::activation")]
    pub activation: Activation,
}

impl Default for ArchConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HpConfig {
    #[serde(default = "defaults::local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "defaults::local_batch")]
    pub local_batch: usize,
    #[serde(default = "defaults::local_lr")]
    pub local_lr: f64,
    #[serde(default = "defaults::distill_steps")]
    pub distill_steps: u64,
    #[serde(default = "defaults::distill_batch")]
    pub distill_batch: usize,
    #[serde(default = "defaults::generator_lr")]
    pub generator_lr: f64,
    #[serde(default = "defaults::student_lr")]
    pub student_lr: f64,
    #[serde(default = "defaults::disc_lr")]
    pub disc_lr: f64,
    /// Softmax temperature for the distillation losses.
    #[serde(default = "defaults::tau")]
    pub tau: f64,
    #[serde(default = "defaults::lambda")]
    pub lambda_conf: f64,
    #[serde(default = "defaults::lambda")]
    pub lambda_unique: f64,
    #[serde(default = "defaults::lambda")]
    pub lambda_mimic: f64,
    #[serde(default = "defaults::lambda")]
    pub lambda_gan: f64,
    /// Cosine-anneal the distillation learning rates to zero.
    #[serde(default = "defaults::cosine_anneal")]
    pub cosine_anneal: bool,
    #[serde(default = "defaults::eval_interval")]
    pub eval_interval: u64,
    #[serde(default = "defaults::fedavg_rounds")]
    pub fedavg_rounds: u64,
    #[serde(default = "defaults::fedavg_local_epochs")]
    pub fedavg_local_epochs: usize,
    #[serde(default = "defaults::local_batch")]
    pub fedavg_batch: usize,
    #[serde(default = "defaults::fedavg_lr")]
    pub fedavg_lr: f64,
}

impl Default for HpConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpSettings {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "defaults::clip_norm")]
    pub clip_norm: f64,
    #[serde(default)]
    pub noise_multiplier: f64,
}

impl Default for DpSettings {
    fn default() -> Self {
        Self { enabled: false, clip_norm: defaults::clip_norm(), noise_multiplier: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub dataset: DatasetSpec,
    #[serde(default = "defaults::nodes")]
    pub nodes: usize,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub hp: HpConfig,
    #[serde(default)]
    pub dp: DpSettings,
    #[serde(default = "defaults::output_dir")]
    pub output_dir: String,
}

mod defaults {
    use crate::nets::Activation;

    pub fn classes() -> usize {
        4
    }
    pub fn per_class() -> usize {
        400
    }
    pub fn dim() -> usize {
        2
    }
    pub fn spread() -> f64 {
        0.12
    }
    pub fn test_fraction() -> f64 {
        0.25
    }
    pub fn downsample_to() -> usize {
        64
    }
    pub fn task_hidden() -> Vec<usize> {
        vec![64, 64]
    }
    pub fn generator_hidden() -> Vec<usize> {
        vec![128, 128]
    }
    pub fn disc_hidden() -> Vec<usize> {
        vec![64]
    }
    pub fn noise_dim() -> usize {
        32
    }
    pub fn patch_grid() -> usize {
        2
    }
    pub fn activation() -> Activation {
        Activation::Relu
    }
    pub fn local_epochs() -> usize {
        150
    }
    pub fn local_batch() -> usize {
        32
    }
    pub fn local_lr() -> f64 {
        5e-3
    }
    pub fn distill_steps() -> u64 {
        1500
    }
    pub fn distill_batch() -> usize {
        64
    }
    pub fn generator_lr() -> f64 {
        1e-4
    }
    pub fn student_lr() -> f64 {
        3e-3
    }
    pub fn disc_lr() -> f64 {
        1e-3
    }
    pub fn tau() -> f64 {
        1.0
    }
    pub fn lambda() -> f64 {
        1.0
    }
    pub fn clip_norm() -> f64 {
        1.0
    }
    pub fn cosine_anneal() -> bool {
        true
    }
    pub fn eval_interval() -> u64 {
        50
    }
    pub fn fedavg_rounds() -> u64 {
        50
    }
    pub fn fedavg_local_epochs() -> usize {
        1
    }
    pub fn fedavg_lr() -> f64 {
        0.05
    }
    pub fn nodes() -> usize {
        5
    }
    pub fn alpha() -> f64 {
        0.3
    }
    pub fn seeds() -> Vec<u64> {
        vec![0, 1, 2]
    }
    pub fn output_dir() -> String {
        "out".to_string()
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        fn positive(name: &str, v: f64) -> Result<()> {
            if v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        }
        if self.nodes == 0 {
            return Err(Error::Config("nodes must be at least 1".into()));
        }
        positive("alpha", self.alpha)?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        positive("hp.local_lr", self.hp.local_lr)?;
        positive("hp.generator_lr", self.hp.generator_lr)?;
        positive("hp.student_lr", self.hp.student_lr)?;
        positive("hp.disc_lr", self.hp.disc_lr)?;
        positive("hp.fedavg_lr", self.hp.fedavg_lr)?;
        positive("hp.tau", self.hp.tau)?;
        if self.hp.local_batch == 0 || self.hp.distill_batch == 0 || self.hp.fedavg_batch == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if self.hp.eval_interval == 0 {
            return Err(Error::Config("hp.eval_interval must be at least 1".into()));
        }
        if self.arch.patch_grid == 0 {
            return Err(Error::Config("arch.patch_grid must be at least 1".into()));
        }
        if self.arch.noise_dim == 0 {
            return Err(Error::Config("arch.noise_dim must be at least 1".into()));
        }
        if let Some(per_node) = &self.arch.teacher_hidden_per_node {
            if per_node.len() != self.nodes {
                return Err(Error::Config(format!(
                    "arch.teacher_hidden_per_node has {} entries for {} nodes",
                    per_node.len(),
                    self.nodes
                )));
            }
        }
        match &self.dataset {
            DatasetSpec::Blobs { classes, per_class, dim, spread, test_fraction } => {
                if *classes < 2 {
                    return Err(Error::Config("dataset.classes must be at least 2".into()));
                }
                if *per_class == 0 {
                    return Err(Error::Config("dataset.per_class must be at least 1".into()));
                }
                if *dim < 2 {
                    return Err(Error::Config("dataset.dim must be at least 2".into()));
                }
                if *spread < 0.0 {
                    return Err(Error::Config(format!("dataset.spread must be nonnegative, got {spread}")));
                }
                if !(0.0..1.0).contains(test_fraction) {
                    return Err(Error::Config(format!(
                        "dataset.test_fraction must be in [0, 1), got {test_fraction}"
                    )));
                }
            }
            DatasetSpec::Idx { downsample_to, test_fraction, .. } => {
                let side = (*downsample_to as f64).sqrt().round() as usize;
                if side * side != *downsample_to {
                    return Err(Error::Config(format!(
                        "dataset.downsample_to must be a perfect square, got {downsample_to}"
                    )));
                }
                if !(0.0..1.0).contains(test_fraction) {
                    return Err(Error::Config(format!(
                        "dataset.test_fraction must be in [0, 1), got {test_fraction}"
                    )));
                }
            }
        }
        if self.dp.enabled && self.dp.clip_norm <= 0.0 {
            return Err(Error::Config(format!(
                "dp.clip_norm must be positive when dp is enabled, got {}",
                self.dp.clip_norm
            )));
        }
        if self.dp.noise_multiplier < 0.0 {
            return Err(Error::Config(format!(
                "dp.noise_multiplier must be nonnegative, got {}",
                self.dp.noise_multiplier
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Reads and validates a config file; unknown keys are rejected with the
/// offending key named in the error.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg: RunConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}
