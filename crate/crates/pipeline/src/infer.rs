//! Generation: one reference frame, driving audio, and a caption in; a
//! clamped pixel video out.
//!
//! The clip is produced window by window. The audio-to-motion model
//! bootstraps the motion context for the first window; every later window
//! is conditioned on the last latent frames of the one before it, which is
//! what carries identity and motion across window boundaries.

use std::path::Path;

use facetalk_core::a2m::A2M;
use facetalk_core::audio::{frames_for_duration, AudioClip};
use facetalk_core::diffusion::ddim_sample;
use facetalk_core::diffusion::unet::{ref_feature_arrays, EpsModel};
use facetalk_core::emotion::{build_emotion_embedding, SyntheticExtractorSuite};
use facetalk_core::features::{AudioFeatureExtractor, MelFeatureExtractor};
use facetalk_core::text::{HashTextEncoder, TextEncoder};
use facetalk_core::video::VideoTensor;
use facetalk_core::{Error, Result};
use ndarray::{s, Array2};

use crate::checkpoint::load_checkpoint;
use crate::config::PipelineConfig;
use crate::train::autoenc_from_store;

/// Inputs for one generation call.
pub struct InferRequest<'a> {
    /// Single-frame identity reference at the configured resolution.
    pub reference: &'a VideoTensor,
    /// Driving audio; resampled and peak-normalized internally.
    pub audio: &'a AudioClip,
    /// Attribute/action caption; may be empty.
    pub caption: &'a str,
    pub seed: u64,
    /// Override for the configured sampler step count.
    pub ddim_steps: Option<usize>,
}

/// A generated clip plus bookkeeping about how it was made.
#[derive(Debug, Clone)]
pub struct InferOutput {
    pub video: VideoTensor,
    /// Denoising windows the clip was stitched from.
    pub windows: usize,
    /// Training step of the checkpoint that produced it.
    pub checkpoint_step: u64,
}

/// Generate a talking-face clip from a stage-2 checkpoint.
pub fn generate(
    cfg: &PipelineConfig,
    checkpoint_base: &Path,
    req: &InferRequest,
) -> Result<InferOutput> {
    cfg.validate()?;
    let (manifest, mut store) = load_checkpoint(checkpoint_base)?;
    if manifest.stage != 2 {
        return Err(Error::Checkpoint(format!(
            "generation needs a stage-2 checkpoint, found stage {}",
            manifest.stage
        )));
    }
    if manifest.config_hash != cfg.hash() {
        return Err(Error::Checkpoint(
            "checkpoint was produced by a different configuration".into(),
        ));
    }
    let ae = autoenc_from_store(cfg, &store)?;
    let ucfg = cfg.unet_config();
    let schedule = cfg.schedule()?;
    let steps = req.ddim_steps.unwrap_or(cfg.infer.ddim_steps);
    if steps == 0 || steps > cfg.model.timesteps {
        return Err(Error::Config(format!(
            "ddim_steps {steps} must be in 1..={}",
            cfg.model.timesteps
        )));
    }
    if req.reference.num_frames() != 1 {
        return Err(Error::invalid(format!(
            "reference must be a single frame, got {}",
            req.reference.num_frames()
        )));
    }
    if req.reference.h != cfg.dataset.height || req.reference.w != cfg.dataset.width {
        return Err(Error::shape(format!(
            "reference frame is {}x{}, dataset is {}x{}",
            req.reference.h, req.reference.w, cfg.dataset.height, cfg.dataset.width
        )));
    }

    // Standardize audio the same way ingestion does.
    let audio = req.audio.resample(cfg.dataset.sample_rate)?.peak_normalize();
    let n_out = frames_for_duration(audio.duration_s(), cfg.dataset.fps);
    if n_out == 0 {
        return Err(Error::invalid("driving audio is empty"));
    }

    let extractor = MelFeatureExtractor { dim: cfg.model.audio_dim, window: 1024 };
    let features = extractor.extract(&audio)?;
    let emotion_vec =
        build_emotion_embedding(&audio, &SyntheticExtractorSuite::with_default_dims(), &cfg.emotion_config())?
            .e_full;
    let emotion =
        Array2::from_shape_vec((1, emotion_vec.len()), emotion_vec).expect("emotion row");
    let text_tokens = HashTextEncoder.encode(req.caption)?;
    let ref_latent = ae.encode_video(req.reference)?;
    let refs = ref_feature_arrays(&store, &ucfg, &ref_latent, &text_tokens)?;

    // Bootstrap motion context for the first window from the audio alone.
    let a2m = A2M::new(cfg.a2m_config())?;
    let boot = a2m.generate_from_features(&mut store, &ref_latent, &features, req.seed)?;
    let (f, d, m) = (ucfg.frames, ucfg.latent_dim(), ucfg.motion_len);
    let mut motion_rows = Array2::zeros((m, d));
    for k in 0..m {
        let src = k.min(boot.data.nrows() - 1);
        motion_rows.row_mut(k).assign(&boot.data.row(src));
    }

    let n_windows = n_out.div_ceil(f);
    let mut latents = Array2::zeros((n_windows * f, d));
    for w in 0..n_windows {
        // Per-slot audio rows; the final window repeats the last frame's.
        let mut window_audio = Array2::zeros((f, ucfg.audio_dim));
        for i in 0..f {
            let src = (w * f + i).min(n_out - 1);
            window_audio.row_mut(i).assign(&features.features.row(src));
        }
        let model = EpsModel {
            cfg: &ucfg,
            store: &store,
            ref_features: refs.clone(),
            text: text_tokens.clone(),
            emotion: Some(emotion.clone()),
            audio: Some(window_audio),
            motion: Some(motion_rows.clone()),
            temporal: true,
        };
        let x = ddim_sample(&model, (f, d), &schedule, steps, req.seed, &[w as u64])?;
        motion_rows = x.slice(s![f - m..f, ..]).to_owned();
        latents.slice_mut(s![w * f..(w + 1) * f, ..]).assign(&x);
    }

    let decoded = ae.decode_to_video(&latents.slice(s![0..n_out, ..]).to_owned())?;
    let video = VideoTensor::new(
        decoded.data.mapv(|v| v.clamp(0.0, 1.0)),
        3,
        cfg.dataset.height,
        cfg.dataset.width,
    )?;
    Ok(InferOutput { video, windows: n_windows, checkpoint_step: manifest.step })
}

/// Write a generated clip as numbered PNG frames.
pub fn write_frames(video: &VideoTensor, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for idx in 0..video.num_frames() {
        video.save_frame_png(idx, &dir.join(format!("{idx:06}.png")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ingest_dataset, write_raw_clip, RawMeta};
    use crate::train::{train_stage1, train_stage2};
    use facetalk_core::synth::generate_clip;
    use tempfile::TempDir;

    fn trained(tmp: &TempDir) -> (PipelineConfig, std::path::PathBuf, std::path::PathBuf) {
        let mut cfg = PipelineConfig::default();
        cfg.dataset.min_duration_s = 0.8;
        cfg.train.stage1_steps = 2;
        cfg.train.stage2_steps = 2;
        cfg.train.a2m_steps = 2;
        cfg.train.batch_size = 1;
        let raw = tmp.path().join("raw");
        for i in 0..2 {
            let clip = generate_clip(33, i, 1.2, 32, 32).unwrap();
            write_raw_clip(&raw.join(&clip.id), &clip.video, &clip.audio, &clip.caption, &RawMeta::default())
                .unwrap();
        }
        let data = tmp.path().join("data");
        ingest_dataset(&raw, &data, &cfg.dataset).unwrap();
        let out = tmp.path().join("run");
        let s1 = train_stage1(&cfg, &data, &out, None).unwrap();
        let s2 = train_stage2(&cfg, &data, &out, &s1.checkpoint, None).unwrap();
        (cfg, s1.checkpoint, s2.checkpoint)
    }

    #[test]
    fn generate_end_to_end() {
        let tmp = TempDir::new().unwrap();
        let (cfg, ckpt1, ckpt2) = trained(&tmp);
        let driver = generate_clip(34, 0, 1.2, 32, 32).unwrap();
        let reference = VideoTensor::new(driver.video.frame(0), 3, 32, 32).unwrap();
        let req = InferRequest {
            reference: &reference,
            audio: &driver.audio,
            caption: "calm face speaking",
            seed: 11,
            ddim_steps: Some(4),
        };

        let out = generate(&cfg, &ckpt2, &req).unwrap();
        assert_eq!(out.video.num_frames(), 30, "1.2 s at 25 fps");
        assert_eq!(out.windows, 3, "30 frames stitched from 14-frame windows");
        assert!(out.video.data.iter().all(|&v| (0.0..=1.0).contains(&v)));

        // Same request, same bytes; a different seed changes the clip.
        let again = generate(&cfg, &ckpt2, &req).unwrap();
        assert_eq!(out.video.data, again.video.data);
        let other = generate(&cfg, &ckpt2, &InferRequest { seed: 12, ..req }).unwrap();
        assert_ne!(out.video.data, other.video.data);

        // Stage-1 checkpoints cannot generate (no motion model yet).
        let err = generate(&cfg, &ckpt1, &req).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");

        // The reference must be a single frame at dataset resolution.
        let two = VideoTensor::new(ndarray::Array2::zeros((2, 3 * 32 * 32)), 3, 32, 32).unwrap();
        assert!(generate(&cfg, &ckpt2, &InferRequest { reference: &two, ..req }).is_err());

        let frames_dir = tmp.path().join("frames");
        write_frames(&out.video, &frames_dir).unwrap();
        assert_eq!(std::fs::read_dir(&frames_dir).unwrap().count(), 30);
    }

    #[test]
    fn short_audio_still_yields_one_window() {
        let tmp = TempDir::new().unwrap();
        let (cfg, _, ckpt2) = trained(&tmp);
        // 0.2 s of audio: 5 frames, less than one window and shorter than
        // the motion context.
        let driver = generate_clip(35, 0, 0.2, 32, 32).unwrap();
        let reference = VideoTensor::new(driver.video.frame(0), 3, 32, 32).unwrap();
        let out = generate(
            &cfg,
            &ckpt2,
            &InferRequest {
                reference: &reference,
                audio: &driver.audio,
                caption: "",
                seed: 3,
                ddim_steps: Some(3),
            },
        )
        .unwrap();
        assert_eq!(out.video.num_frames(), 5);
        assert_eq!(out.windows, 1);
    }
}
