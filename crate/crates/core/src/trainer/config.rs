//! Run configuration, read from a TOML file with nested sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{BackboneConfig, ScheduleParams};
use crate::error::{Error, Result};
use crate::supervision::{EdgeParams, EncoderSpec, LossWeights};

/// Which auxiliary terms are built at all. A term that is enabled but has a
/// zero weight is computed and logged without affecting the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TermSwitches {
    pub text: bool,
    pub edge: bool,
    pub perceptual: bool,
}

impl Default for TermSwitches {
    fn default() -> Self {
        Self {
            text: true,
            edge: true,
            perceptual: true,
        }
    }
}

impl TermSwitches {
    pub fn none() -> Self {
        Self {
            text: false,
            edge: false,
            perceptual: false,
        }
    }
}

/// Input and output locations used by the command-line front end.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Corpus directory or manifest file.
    pub corpus: Option<PathBuf>,
    /// Enhanced prompts (JSON lines); raw descriptions when absent.
    pub prompts: Option<PathBuf>,
    /// Split file; recomputed from the seed when absent.
    pub split: Option<PathBuf>,
    /// Checkpoint to resume from.
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub max_steps: u64,
    /// Validation cadence in steps; 0 disables validation.
    pub eval_every: u64,
    /// Checkpoint cadence in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
    pub resolution: usize,
    /// InfoNCE temperature.
    pub temperature: f64,
    /// Candidates per anchor including the positive.
    pub contrastive_candidates: usize,
    /// Reverse-process steps used for validation samples.
    pub sample_steps: usize,
    /// Number of validation prompts scored at each evaluation.
    pub validation_prompts: usize,
    pub loss_weights: LossWeights,
    pub terms: TermSwitches,
    pub edge: EdgeParams,
    pub encoder: EncoderSpec,
    pub schedule: ScheduleParams,
    pub backbone: BackboneConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 24,
            learning_rate: 1e-6,
            adam_betas: [0.9, 0.999],
            adam_eps: 1e-8,
            weight_decay: 0.0,
            max_steps: 1000,
            eval_every: 100,
            checkpoint_every: 500,
            resolution: 16,
            temperature: 1.0,
            contrastive_candidates: 8,
            sample_steps: 50,
            validation_prompts: 8,
            loss_weights: LossWeights::default(),
            terms: TermSwitches::default(),
            edge: EdgeParams::default(),
            encoder: EncoderSpec::default(),
            schedule: ScheduleParams::desk(),
            backbone: BackboneConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be >= 1".into()));
        }
        if self.adam_betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::Config("adam_betas must lie in [0, 1)".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        if self.contrastive_candidates < 2 {
            return Err(Error::Config("contrastive_candidates must be >= 2".into()));
        }
        if self.sample_steps == 0 || self.sample_steps > self.schedule.timesteps {
            return Err(Error::Config(format!(
                "sample_steps must be in 1..={}",
                self.schedule.timesteps
            )));
        }
        if self.resolution != self.backbone.resolution {
            return Err(Error::Config(format!(
                "resolution {} differs from backbone resolution {}",
                self.resolution, self.backbone.resolution
            )));
        }
        self.loss_weights.validate()?;
        self.edge.validate()?;
        self.backbone.validate()?;
        self.schedule.build()?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
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

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
