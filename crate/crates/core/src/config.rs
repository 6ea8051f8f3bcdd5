//! Run configuration: one JSON document, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::capr::CaprConfig;
use crate::data::SceneSpec;
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{Components, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adam with decoupled weight decay.
    AdamW,
}

/// Learning-rate schedule over the whole run, evaluated per optimizer step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` to zero at the final step.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            lr: 3e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: LrSchedule::Constant,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Boundary band radius in pixels for bIoU.
    pub biou_band: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { biou_band: 3 }
    }
}

/// Where samples come from: a synthetic spec, or image/mask directories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "source")]
pub enum DataSource {
    Synthetic { spec: SceneSpec, count: usize },
    Directory {
        images: PathBuf,
        masks: PathBuf,
        /// `rugd`, `rellis3d`, `identity`, or a path to a remap table.
        remap: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: DataSource,
    pub val: DataSource,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: DataSource::Synthetic {
                spec: SceneSpec::default(),
                count: 16,
            },
            val: DataSource::Synthetic {
                spec: SceneSpec {
                    seed: 1,
                    ..SceneSpec::default()
                },
                count: 4,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub capr: CaprConfig,
    pub losses: LossConfig,
    pub metrics: MetricsConfig,
    pub data: DataConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub ablation: Components,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            capr: CaprConfig::default(),
            losses: LossConfig::default(),
            metrics: MetricsConfig::default(),
            data: DataConfig::default(),
            optimizer: OptimizerConfig::default(),
            epochs: 10,
            batch_size: 4,
            seed: 0,
            ablation: Components::ALL,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            capr: self.capr.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.losses.validate()?;
        if self.capr.iterations == 0 || self.capr.hidden == 0 {
            return Err(Error::Config("capr iterations and hidden width must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.metrics.biou_band == 0 {
            return Err(Error::Config("biou_band must be at least 1".into()));
        }
        let o = &self.optimizer;
        let ok = o.lr > 0.0
            && o.weight_decay >= 0.0
            && (0.0..1.0).contains(&o.beta1)
            && (0.0..1.0).contains(&o.beta2)
            && o.eps > 0.0;
        if !ok {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        for src in [&self.data.train, &self.data.val] {
            if let DataSource::Synthetic { spec, .. } = src {
                spec.validate()?;
            }
        }
        Ok(())
    }

    /// SHA-256 of the compact JSON encoding, as lowercase hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("run config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}
