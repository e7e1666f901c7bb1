//! JSON run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoencoder::{AeMode, AeTrainConfig, AutoencoderConfig};
use crate::dataset::{DatasetConfig, Style};
use crate::denoiser::{DenoiserConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::guidance::GuidanceScales;
use crate::sampler::{MeanConvention, SamplerConfig};
use crate::schedule::{NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
use crate::structure::{StructureConfig, StructureMode};
use crate::temporal::{DeflickerTrainConfig, TemporalConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

/// Sizes of the autoencoder and the denoiser.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Pixel channels.
    pub channels: usize,
    /// Latent channels of the learned autoencoder.
    pub latent: usize,
    pub autoencoder: AeMode,
    pub ae_hidden: usize,
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let ae = AutoencoderConfig::default();
        let dn = DenoiserConfig::default();
        Self {
            channels: ae.channels,
            latent: ae.latent_channels,
            autoencoder: ae.mode,
            ae_hidden: ae.hidden,
            hidden: dn.hidden,
            heads: dn.heads,
            head_dim: dn.head_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub seed: u64,
    pub lambda: f64,
    pub structure: StructureMode,
    pub noising_strength: f64,
    pub mean_convention: MeanConvention,
    /// Denoising horizon, at most `schedule.T`.
    pub steps: usize,
    pub style: Style,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let s = SamplerConfig::default();
        Self {
            seed: s.seed,
            lambda: s.structure.lambda,
            structure: s.structure.mode,
            noising_strength: s.noising_strength,
            mean_convention: s.mean_convention,
            steps: s.steps,
            style: s.style,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub seed: u64,
    pub autoencoder: AeTrainConfig,
    pub denoiser: TrainConfig,
    pub deflicker: DeflickerTrainConfig,
    /// Peak per-frame brightness offset of the synthetic flicker corpus.
    pub flicker_amplitude: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            seed: 7,
            autoencoder: AeTrainConfig::default(),
            denoiser: TrainConfig::default(),
            deflicker: DeflickerTrainConfig::default(),
            flicker_amplitude: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub data: PathBuf,
    pub autoencoder: PathBuf,
    pub denoiser: PathBuf,
    pub deflicker: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            data: "data".into(),
            autoencoder: "models/autoencoder.savt".into(),
            denoiser: "models/denoiser.savt".into(),
            deflicker: "models/deflicker.savt".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schedule: ScheduleSection,
    pub data: DatasetConfig,
    pub model: ModelSection,
    pub guidance: GuidanceScales,
    pub sampler: SamplerSection,
    pub temporal: TemporalConfig,
    pub training: TrainingSection,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        if self.model.channels != self.data.channels {
            return Err(Error::Config(format!(
                "model.channels = {} but data.channels = {}",
                self.model.channels, self.data.channels
            )));
        }
        self.denoiser_config().validate()?;
        self.temporal.validate()?;
        self.sampler_config().validate(&self.schedule()?)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.schedule.steps, self.schedule.beta_start, self.schedule.beta_end)
    }

    pub fn autoencoder_config(&self) -> AutoencoderConfig {
        let m = &self.model;
        match m.autoencoder {
            AeMode::Identity => AutoencoderConfig::identity(m.channels),
            AeMode::Learned => AutoencoderConfig {
                mode: AeMode::Learned,
                channels: m.channels,
                latent_channels: m.latent,
                hidden: m.ae_hidden,
            },
        }
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        let m = &self.model;
        DenoiserConfig {
            latent_channels: self.autoencoder_config().latent_shape(1, 1)[0],
            hidden: m.hidden,
            heads: m.heads,
            head_dim: m.head_dim,
            vocab: Style::ALL.len(),
            steps: self.schedule.steps,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        let s = &self.sampler;
        SamplerConfig {
            steps: s.steps,
            seed: s.seed,
            scales: self.guidance,
            structure: StructureConfig {
                mode: s.structure,
                lambda: s.lambda,
            },
            noising_strength: s.noising_strength,
            mean_convention: s.mean_convention,
            style: s.style,
        }
    }
}
