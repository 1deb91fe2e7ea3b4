//! The experiment configuration: one TOML document with a table per
//! module. Unknown keys are rejected so typos surface as errors that name
//! the offending key.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::LossWeights;
use crate::diffusion::{make_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::networks::ArchConfig;
use crate::phantom::PhantomConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub schedule: String,
    pub steps: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { schedule: "linear".into(), steps: 1000 }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(&self.schedule, self.steps).map_err(|e| Error::Config(format!("diffusion: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub baseline_branch_fraction: f64,
    /// Epochs between intermediate checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
    /// Optional cap on optimizer steps across all epochs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
    /// Seed for parameter initialisation.
    pub init_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-4,
            seed: 0,
            baseline_branch_fraction: 0.25,
            checkpoint_interval: 1,
            max_steps: None,
            init_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train: batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("train: learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.baseline_branch_fraction) {
            return Err(Error::Config("train: baseline_branch_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub sample_steps: usize,
    pub seed: u64,
    /// Diffusion step for attention extraction; defaults to `T / 2`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention_step: Option<usize>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { sample_steps: 50, seed: 0, attention_step: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FidExtractor {
    /// The trained semantic encoder's latent.
    Latent,
    /// 4×4 average-pooled pixels.
    PooledPixels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub fid_extractor: FidExtractor,
    pub dilation_radius: usize,
    pub ventricle_band: [f64; 2],
    pub hippocampus_band: [f64; 2],
    pub amygdala_band: [f64; 2],
    /// Evaluate only the first N test subjects.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_subjects: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fid_extractor: FidExtractor::Latent,
            dilation_radius: 2,
            ventricle_band: [0.05, 0.25],
            hippocampus_band: [0.5, 0.675],
            amygdala_band: [0.675, 1.0],
            max_subjects: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub data: PhantomConfig,
    pub model: ArchConfig,
    pub diffusion: DiffusionConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.message().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Only valid configs are guaranteed to serialize.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("validated config is representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.diffusion.schedule()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.data.image_size != self.model.image_size {
            return Err(Error::Config(format!(
                "data.image_size ({}) differs from model.image_size ({})",
                self.data.image_size, self.model.image_size
            )));
        }
        let ts = self.inference.sample_steps;
        if ts == 0 || ts > self.diffusion.steps {
            return Err(Error::Config(format!("inference.sample_steps must lie in [1, {}]", self.diffusion.steps)));
        }
        if let Some(t) = self.inference.attention_step {
            if t == 0 || t > self.diffusion.steps {
                return Err(Error::Config(format!("inference.attention_step must lie in [1, {}]", self.diffusion.steps)));
            }
        }
        for (name, b) in [
            ("ventricle_band", self.eval.ventricle_band),
            ("hippocampus_band", self.eval.hippocampus_band),
            ("amygdala_band", self.eval.amygdala_band),
        ] {
            if !(b[0] < b[1]) {
                return Err(Error::Config(format!("eval.{name} must be an increasing pair")));
            }
        }
        // TOML integers are i64; a seed or count above that would only fail
        // when the manifest is written, after the work is done.
        for (name, v) in [
            ("data.seed", self.data.seed),
            ("train.seed", self.train.seed),
            ("train.init_seed", self.train.init_seed),
            ("train.epochs", self.train.epochs as u64),
            ("train.max_steps", self.train.max_steps.unwrap_or(0)),
            ("inference.seed", self.inference.seed),
        ] {
            if v > i64::MAX as u64 {
                return Err(Error::Config(format!("{name} = {v} exceeds the largest storable integer {}", i64::MAX)));
            }
        }
        Ok(())
    }
}
