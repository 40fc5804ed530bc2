//! One declarative configuration for every pipeline stage.
//!
//! The file is TOML; absent fields take defaults, unknown fields are
//! rejected. [`PipelineConfig::hash`] is a SHA-256 over the canonical JSON
//! serialization and is stamped into checkpoints and metric reports, so any
//! artifact can be matched to the configuration that produced it.

use facetalk_core::a2m::A2MConfig;
use facetalk_core::autoenc::{LATENT_C, PATCH};
use facetalk_core::diffusion::unet::UNetConfig;
use facetalk_core::diffusion::NoiseSchedule;
use facetalk_core::emotion::EmotionConfig;
use facetalk_core::losses::LossWeights;
use facetalk_core::text::TEXT_DIM;
use facetalk_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Frame geometry and standardization targets for ingested clips.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub fps: f64,
    pub sample_rate: u32,
    /// Clips shorter than this are rejected at ingest.
    pub min_duration_s: f64,
    /// Clips longer than this are rejected at ingest.
    pub max_duration_s: f64,
    pub height: usize,
    pub width: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            fps: 25.0,
            sample_rate: 16_000,
            min_duration_s: 3.0,
            max_duration_s: 20.0,
            height: 32,
            width: 32,
        }
    }
}

/// Denoiser topology and the diffusion schedule.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub frames_per_window: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub audio_dim: usize,
    pub audio_radius: usize,
    pub motion_len: usize,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            frames_per_window: 14,
            d_model: 32,
            n_heads: 2,
            n_blocks: 3,
            audio_dim: 16,
            audio_radius: 1,
            motion_len: 2,
            timesteps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Audio-to-motion flow-VAE dimensions.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct A2mSection {
    pub latent_dim: usize,
    pub flow_depth: usize,
    pub cond_hidden: usize,
    pub vae_hidden: usize,
    pub kl_beta: f64,
}

impl Default for A2mSection {
    fn default() -> Self {
        Self { latent_dim: 32, flow_depth: 4, cond_hidden: 64, vae_hidden: 128, kl_beta: 1e-2 }
    }
}

/// Emotion-embedding segmentation knobs (extractor dims are fixed by the
/// extractor suite itself).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EmotionSection {
    pub window_s: f64,
    pub overlap: f64,
    pub k_fixed: usize,
}

impl Default for EmotionSection {
    fn default() -> Self {
        let e = EmotionConfig::default();
        Self { window_s: e.window_s, overlap: e.overlap, k_fixed: e.k_fixed }
    }
}

/// Optimization schedule for both stages.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub seed: u64,
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    /// Audio-to-motion pre-training steps at the start of stage 2.
    pub a2m_steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub a2m_learning_rate: f64,
    /// Overwrite the stage checkpoint every this many steps, so a killed
    /// run can resume instead of starting the stage over.
    pub checkpoint_every: u64,
    pub weights: LossWeights,
    /// Where ingested clips live, relative to the working directory.
    pub data_dir: String,
    /// Where checkpoints and loss reports are written.
    pub out_dir: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            seed: 7,
            stage1_steps: 1500,
            stage2_steps: 1500,
            a2m_steps: 400,
            batch_size: 2,
            learning_rate: 1e-4,
            a2m_learning_rate: 1e-3,
            checkpoint_every: 500,
            weights: LossWeights::default(),
            data_dir: "data/ingested".into(),
            out_dir: "runs".into(),
        }
    }
}

/// Sampling defaults for inference.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct InferSection {
    pub ddim_steps: usize,
}

impl Default for InferSection {
    fn default() -> Self {
        Self { ddim_steps: 40 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub a2m: A2mSection,
    pub emotion: EmotionSection,
    pub train: TrainSection,
    pub infer: InferSection,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config write: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    /// SHA-256 hex of the canonical (JSON) serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Latent grid implied by the frame geometry and the fixed patch size.
    pub fn latent_hw(&self) -> (usize, usize) {
        (self.dataset.height / PATCH, self.dataset.width / PATCH)
    }

    pub fn latent_dim(&self) -> usize {
        let (lh, lw) = self.latent_hw();
        LATENT_C * lh * lw
    }

    pub fn unet_config(&self) -> UNetConfig {
        let (lh, lw) = self.latent_hw();
        UNetConfig {
            latent_c: LATENT_C,
            latent_h: lh,
            latent_w: lw,
            frames: self.model.frames_per_window,
            d_model: self.model.d_model,
            n_heads: self.model.n_heads,
            n_blocks: self.model.n_blocks,
            audio_dim: self.model.audio_dim,
            audio_radius: self.model.audio_radius,
            text_dim: TEXT_DIM,
            emotion_dim: self.emotion_config().full_dim(),
            motion_len: self.model.motion_len,
        }
    }

    pub fn a2m_config(&self) -> A2MConfig {
        let (lh, lw) = self.latent_hw();
        A2MConfig {
            latent_dim: self.a2m.latent_dim,
            flow_depth: self.a2m.flow_depth,
            cond_hidden: self.a2m.cond_hidden,
            vae_hidden: self.a2m.vae_hidden,
            audio_dim: self.model.audio_dim,
            motion_c: LATENT_C,
            motion_h: lh,
            motion_w: lw,
            ref_dim: self.latent_dim(),
            kl_beta: self.a2m.kl_beta,
        }
    }

    pub fn emotion_config(&self) -> EmotionConfig {
        EmotionConfig {
            window_s: self.emotion.window_s,
            overlap: self.emotion.overlap,
            k_fixed: self.emotion.k_fixed,
            ..EmotionConfig::default()
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.model.timesteps, self.model.beta_start, self.model.beta_end)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.fps <= 0.0 || !d.fps.is_finite() {
            return Err(Error::Config(format!("fps {} must be positive", d.fps)));
        }
        if d.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        if !(d.min_duration_s > 0.0 && d.min_duration_s <= d.max_duration_s) {
            return Err(Error::Config(format!(
                "duration bounds [{}, {}] must satisfy 0 < min <= max",
                d.min_duration_s, d.max_duration_s
            )));
        }
        if d.height < 16 || d.width < 16 || d.height % PATCH != 0 || d.width % PATCH != 0 {
            return Err(Error::Config(format!(
                "frame size {}x{} must be at least 16x16 and divisible by {PATCH}",
                d.height, d.width
            )));
        }
        let min_frames = self.model.frames_per_window + self.model.motion_len;
        if (d.min_duration_s * d.fps).floor() < min_frames as f64 {
            return Err(Error::Config(format!(
                "min duration {}s at {} fps cannot hold {} window + {} context frames",
                d.min_duration_s, d.fps, self.model.frames_per_window, self.model.motion_len
            )));
        }
        self.unet_config().validate()?;
        self.train.weights.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.train.learning_rate <= 0.0 || self.train.a2m_learning_rate <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.train.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        if self.infer.ddim_steps == 0 || self.infer.ddim_steps > self.model.timesteps {
            return Err(Error::Config(format!(
                "ddim_steps {} must be in 1..={}",
                self.infer.ddim_steps, self.model.timesteps
            )));
        }
        self.schedule()?;
        Ok(())
    }
}
