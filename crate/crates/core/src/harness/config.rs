use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clipping::ClipConfig;
use crate::error::{Error, Result};
use crate::losses::{ChimeraConfig, LossKind};
use crate::model::SeparatorConfig;
use crate::optim::OptimizerConfig;
use crate::signal::{StftConfig, SynthConfig};
use crate::tensor::Precision;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    #[default]
    Uniform,
    MagnitudeRatio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_mixtures: usize,
    pub val_mixtures: usize,
    /// Training crops, in STFT frames.
    pub crop_frames: usize,
    pub synth: SynthConfig,
    pub stft: StftConfig,
    pub weights: WeightKind,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_mixtures: 200,
            val_mixtures: 50,
            crop_frames: 32,
            synth: SynthConfig::default(),
            stft: StftConfig::default(),
            weights: WeightKind::Uniform,
        }
    }
}

/// Everything that determines one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub loss: LossKind,
    pub clip: ClipConfig,
    pub optimizer: OptimizerConfig,
    pub model: SeparatorConfig,
    pub data: DataConfig,
    pub chimera: ChimeraConfig,
    pub seed: u64,
    pub iterations: usize,
    pub batch_size: usize,
    pub record_every: usize,
    /// Constant multiplier on the training loss.
    pub loss_scale: f64,
    pub precision: Precision,
    /// Skip the held-out SI-SDR evaluation at the end of a run.
    pub skip_validation: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Mi,
            clip: ClipConfig::default(),
            optimizer: OptimizerConfig::default(),
            model: SeparatorConfig::default(),
            data: DataConfig::default(),
            chimera: ChimeraConfig::default(),
            seed: 0,
            iterations: 2000,
            batch_size: 8,
            record_every: 20,
            loss_scale: 1.0,
            precision: Precision::F64,
            skip_validation: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// The separator with heads and input width implied by the loss and STFT.
    pub fn model_config(&self) -> SeparatorConfig {
        SeparatorConfig {
            mask_head: self.loss.needs_mask_head(),
            embedding_head: self.loss.needs_embedding_head(),
            bins: self.data.stft.bins(),
            sources: 2,
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.clip.validate()?;
        self.optimizer.validate()?;
        self.model_config().validate()?;
        self.data.synth.validate()?;
        if self.batch_size == 0 || self.data.train_mixtures == 0 || self.data.crop_frames == 0 {
            return Err(Error::Config("batch size, training set and crop must be non-empty".into()));
        }
        if !self.skip_validation && self.data.val_mixtures == 0 {
            return Err(Error::Config("validation needs at least one mixture".into()));
        }
        if !(self.loss_scale > 0.0) || !self.loss_scale.is_finite() {
            return Err(Error::Config(format!("loss scale must be positive, got {}", self.loss_scale)));
        }
        if !(0.0..=1.0).contains(&self.chimera.alpha) {
            return Err(Error::Config(format!("chimera alpha {} outside [0, 1]", self.chimera.alpha)));
        }
        Ok(())
    }
}
