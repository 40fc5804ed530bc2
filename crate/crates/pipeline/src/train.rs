//! Two-stage training.
//!
//! Stage 1 fits the frame autoencoder (then freezes it), and trains the
//! reference twin + denoiser with text and temporal conditioning only, on
//! the plain noise-prediction objective. Stage 2 starts from the stage-1
//! checkpoint, first trains the audio-to-motion model (phase A), then
//! fine-tunes the denoiser with audio/emotion/motion conditioning and the
//! four auxiliary losses attached to decoded single-step reconstructions
//! (phase B).
//!
//! Every random draw derives a fresh stream from (seed, stream id, phase,
//! step, batch lane), so runs are bitwise reproducible and independent of
//! batch execution order.

use std::io::Write;
use std::path::{Path, PathBuf};

use facetalk_core::a2m::{annealed_beta, A2M};
use facetalk_core::audio::AudioClip;
use facetalk_core::autodiff::nn::{Ctx, ParamStore};
use facetalk_core::autodiff::opt::Adam;
use facetalk_core::autodiff::Tape;
use facetalk_core::autoenc::PatchAutoencoder;
use facetalk_core::diffusion::unet::{referencenet_forward, unet_forward, CondInputs};
use facetalk_core::diffusion::add_noise;
use facetalk_core::emotion::{
    build_emotion_embedding, extract_va_sequence, resample_va_to_fixed, SyntheticExtractorSuite,
    VASequence,
};
use facetalk_core::features::{AudioFeatureExtractor, MelFeatureExtractor};
use facetalk_core::losses::{
    attr_action_loss_t, au_loss_t, emo_loss_t, sync_loss_t, total_loss, total_loss_t, AUMatrix,
    CaptionEmbedding, LossLine,
};
use facetalk_core::predictors::{PredictorSuite, SyntheticPredictors};
use facetalk_core::rng::{derive_rng, stream};
use facetalk_core::text::{HashTextEncoder, TextEncoder};
use facetalk_core::video::VideoTensor;
use facetalk_core::{Error, Result};
use ndarray::{s, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::PipelineConfig;
use crate::dataset::{
    load_clip_media, load_dataset, motion_context, sample_training_clip, ClipRecord,
};

/// Phase tags folded into every stream derivation so the three training
/// loops never share a random stream.
pub(crate) const PHASE_STAGE1: u64 = 1;
pub(crate) const PHASE_A2M: u64 = 2;
pub(crate) const PHASE_STAGE2: u64 = 3;

/// One clip with everything training needs precomputed.
pub struct PreparedClip {
    pub record: ClipRecord,
    pub video: VideoTensor,
    pub audio: AudioClip,
    /// `[n_frames x latent_dim]` frozen-autoencoder latents.
    pub latents: Array2<f64>,
    /// `[n_frames x audio_dim]` mel rows.
    pub features: Array2<f64>,
    /// `[n_tokens x text_dim]` caption tokens.
    pub text_tokens: Array2<f64>,
    /// `[1 x emotion_dim]` clip-level emotion embedding.
    pub emotion: Array2<f64>,
    /// Clip-level audio VA, resampled to the fixed segment count.
    pub va_gt: VASequence,
    /// `[n_frames x n_au]` detector intensities on the real frames.
    pub au_values: Array2<f64>,
    pub au_ids: Vec<String>,
    pub caption_gt: CaptionEmbedding,
}

/// Summary of one finished training stage.
#[derive(Debug, Clone)]
pub struct StageReport {
    pub stage: u32,
    pub steps_run: u64,
    pub first_total: f64,
    pub last_total: f64,
    pub checkpoint: PathBuf,
    pub lines: Vec<LossLine>,
}

impl StageReport {
    fn from_lines(stage: u32, steps_run: u64, checkpoint: PathBuf, lines: Vec<LossLine>) -> Self {
        let step_total = |step: u64| {
            lines.iter().filter(|l| l.step == step).map(|l| l.weighted).sum::<f64>()
        };
        let first = lines.iter().map(|l| l.step).min();
        let last = lines.iter().map(|l| l.step).max();
        Self {
            stage,
            steps_run,
            first_total: first.map_or(0.0, step_total),
            last_total: last.map_or(0.0, step_total),
            checkpoint,
            lines,
        }
    }
}

fn rows(a: &Array2<f64>, start: usize, len: usize) -> Array2<f64> {
    a.slice(s![start..start + len, ..]).to_owned()
}

fn one_row(a: &Array2<f64>, idx: usize) -> Array2<f64> {
    rows(a, idx, 1)
}

/// Round parameters through f32 so training and checkpoint loads see
/// bit-identical autoencoder weights.
fn quantize_autoenc(ae: &PatchAutoencoder, c: usize, h: usize, w: usize) -> Result<PatchAutoencoder> {
    let q = |a: &Array2<f64>| a.mapv(|v| v as f32 as f64);
    let [(_, mean), (_, basis), (_, scales)] = ae.params();
    PatchAutoencoder::from_params(c, h, w, q(mean), q(basis), q(scales))
}

/// Rebuild the frozen autoencoder from checkpointed parameters.
pub fn autoenc_from_store(cfg: &PipelineConfig, store: &ParamStore) -> Result<PatchAutoencoder> {
    let get = |name: &str| {
        store
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint is missing {name}")))
    };
    PatchAutoencoder::from_params(
        3,
        cfg.dataset.height,
        cfg.dataset.width,
        get("autoenc.mean")?,
        get("autoenc.basis")?,
        get("autoenc.scales")?,
    )
}

/// Precompute per-clip tensors for training.
pub fn prepare_clips(
    cfg: &PipelineConfig,
    media: Vec<(ClipRecord, (VideoTensor, AudioClip))>,
    ae: &PatchAutoencoder,
    predictors: &SyntheticPredictors,
) -> Result<Vec<PreparedClip>> {
    let extractor = MelFeatureExtractor { dim: cfg.model.audio_dim, window: 1024 };
    let encoder = HashTextEncoder;
    let suite = SyntheticExtractorSuite::with_default_dims();
    let ecfg = cfg.emotion_config();
    let mut out = Vec::with_capacity(media.len());
    for (record, (video, audio)) in media {
        let latents = ae.encode_video(&video)?;
        let features = extractor.extract(&audio)?.features;
        if features.nrows() != record.n_frames {
            return Err(Error::shape(format!(
                "clip {}: {} audio feature rows for {} frames",
                record.id,
                features.nrows(),
                record.n_frames
            )));
        }
        let text_tokens = encoder.encode(&record.caption)?;
        let emotion_vec = build_emotion_embedding(&audio, &suite, &ecfg)?.e_full;
        let emotion = Array2::from_shape_vec((1, emotion_vec.len()), emotion_vec)
            .expect("emotion row reshape");
        let va_seq = extract_va_sequence(&audio, &suite, ecfg.window_s, ecfg.overlap)?;
        let flat = resample_va_to_fixed(&va_seq, ecfg.k_fixed)?;
        let pairs: Vec<(f64, f64)> = flat.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        let dur = audio.duration_s();
        let spans: Vec<(f64, f64)> = (0..ecfg.k_fixed)
            .map(|j| {
                (dur * j as f64 / ecfg.k_fixed as f64, dur * (j + 1) as f64 / ecfg.k_fixed as f64)
            })
            .collect();
        let va_gt = VASequence::new(pairs, spans)?;
        let au = predictors.au_detect(&video)?;
        let caption_gt = facetalk_core::text::caption_embedding(&record.caption)?;
        out.push(PreparedClip {
            record,
            video,
            audio,
            latents,
            features,
            text_tokens,
            emotion,
            va_gt,
            au_values: au.values,
            au_ids: au.au_ids,
            caption_gt,
        });
    }
    Ok(out)
}

fn load_media(
    data_root: &Path,
    records: &[ClipRecord],
) -> Result<Vec<(ClipRecord, (VideoTensor, AudioClip))>> {
    records
        .iter()
        .map(|r| Ok((r.clone(), load_clip_media(data_root, r)?)))
        .collect()
}

/// Mean-pooling matrix `[k x frames]` over equal contiguous frame bins.
fn segment_pool_matrix(k: usize, frames: usize) -> Array2<f64> {
    let mut m = Array2::zeros((k, frames));
    for bin in 0..k {
        let lo = bin * frames / k;
        let hi = (((bin + 1) * frames / k).max(lo + 1)).min(frames);
        for f in lo..hi {
            m[(bin, f)] = 1.0 / (hi - lo) as f64;
        }
    }
    m
}

struct Draw<'c> {
    clip: &'c PreparedClip,
    ref_idx: usize,
    window_start: usize,
}

fn draw_batch<'c>(
    clips: &'c [PreparedClip],
    cfg: &PipelineConfig,
    phase: u64,
    step: u64,
) -> Result<Vec<Draw<'c>>> {
    (0..cfg.train.batch_size as u64)
        .map(|lane| {
            let mut rng =
                derive_rng(cfg.train.seed, &[stream::DATA_ORDER, phase, step, lane]);
            let clip = &clips[rng.gen_range(0..clips.len())];
            let s = sample_training_clip(
                clip.record.n_frames,
                cfg.model.frames_per_window,
                cfg.model.motion_len,
                &mut rng,
            )?;
            Ok(Draw { clip, ref_idx: s.ref_idx, window_start: s.window_start })
        })
        .collect()
}

fn draw_timestep(cfg: &PipelineConfig, phase: u64, step: u64, lane: u64, t_max: usize) -> usize {
    let mut rng = derive_rng(cfg.train.seed, &[stream::DIFFUSION_TIMESTEP, phase, step, lane]);
    rng.gen_range(1..=t_max)
}

fn draw_noise(cfg: &PipelineConfig, phase: u64, step: u64, lane: u64, shape: (usize, usize)) -> Array2<f64> {
    let mut rng = derive_rng(cfg.train.seed, &[stream::DIFFUSION_NOISE, phase, step, lane]);
    Array2::from_shape_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

fn open_report(
    out_dir: &Path,
    name: &str,
    append: bool,
) -> Result<std::io::BufWriter<std::fs::File>> {
    std::fs::create_dir_all(out_dir)?;
    let file = if append {
        std::fs::OpenOptions::new().create(true).append(true).open(out_dir.join(name))?
    } else {
        std::fs::File::create(out_dir.join(name))?
    };
    Ok(std::io::BufWriter::new(file))
}

fn check_finite(total: f64, stage: &str, step: u64) -> Result<()> {
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("{stage} total loss at step {step}")));
    }
    Ok(())
}

/// Stage 1: fit + freeze the autoencoder, then train the denoiser and
/// reference twin with text and temporal conditioning on noise prediction.
pub fn train_stage1(
    cfg: &PipelineConfig,
    data_root: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<StageReport> {
    cfg.validate()?;
    let records = load_dataset(data_root)?;
    if records.is_empty() {
        return Err(Error::invalid("dataset has no accepted clips"));
    }
    let ucfg = cfg.unet_config();
    let schedule = cfg.schedule()?;
    let media = load_media(data_root, &records)?;
    let predictors = SyntheticPredictors::new(3, cfg.dataset.height, cfg.dataset.width);

    let (mut store, ae, start_step) = match resume {
        Some(base) => {
            let (manifest, store) = load_checkpoint(base)?;
            if manifest.stage != 1 {
                return Err(Error::Checkpoint(format!(
                    "resume expects a stage-1 checkpoint, found stage {}",
                    manifest.stage
                )));
            }
            if manifest.config_hash != cfg.hash() {
                return Err(Error::Checkpoint(
                    "resume checkpoint was produced by a different configuration".into(),
                ));
            }
            let ae = autoenc_from_store(cfg, &store)?;
            (store, ae, manifest.step)
        }
        None => {
            let videos: Vec<VideoTensor> = media.iter().map(|(_, (v, _))| v.clone()).collect();
            let ae = PatchAutoencoder::fit(&videos, 3, cfg.dataset.height, cfg.dataset.width)?;
            let ae = quantize_autoenc(&ae, 3, cfg.dataset.height, cfg.dataset.width)?;
            let mut store = ParamStore::new(cfg.train.seed);
            for (name, arr) in ae.params() {
                store.set(name, arr.clone());
            }
            (store, ae, 0)
        }
    };
    let frozen_digest = ae.digest();
    let clips = prepare_clips(cfg, media, &ae, &predictors)?;

    let mut adam = Adam::new(cfg.train.learning_rate);
    let mut report = open_report(out_dir, "stage1_losses.jsonl", resume.is_some())?;
    let mut all_lines = Vec::new();
    let base = out_dir.join("stage1");
    let f = ucfg.frames;
    let d = ucfg.latent_dim();

    for step in start_step + 1..=cfg.train.stage1_steps {
        let batch = draw_batch(&clips, cfg, PHASE_STAGE1, step)?;
        let (raw, gmap) = {
            let tape = Tape::new();
            let mut ctx = Ctx::new(&tape, &mut store);
            let mut items = Vec::with_capacity(batch.len());
            for (lane, draw) in batch.iter().enumerate() {
                let t = draw_timestep(cfg, PHASE_STAGE1, step, lane as u64, schedule.t_max());
                let eps = draw_noise(cfg, PHASE_STAGE1, step, lane as u64, (f, d));
                let x0 = rows(&draw.clip.latents, draw.window_start, f);
                let x_t = add_noise(&x0, t, &eps, &schedule)?;
                let ref_latent = one_row(&draw.clip.latents, draw.ref_idx);
                let refs =
                    referencenet_forward(&mut ctx, &ucfg, &ref_latent, &draw.clip.text_tokens)?;
                let cond = CondInputs {
                    ref_features: refs,
                    text: &draw.clip.text_tokens,
                    emotion: None,
                    audio: None,
                    motion: None,
                    temporal: true,
                };
                let x_t_var = tape.constant(x_t);
                let eps_hat = unet_forward(&mut ctx, &ucfg, x_t_var, t, &cond)?;
                let eps_var = tape.constant(eps);
                items.push(tape.mse(eps_hat, eps_var));
            }
            let sum = items.into_iter().reduce(|a, b| tape.add(a, b)).expect("non-empty batch");
            let mean = tape.scale(sum, 1.0 / batch.len() as f64);
            let raw = tape.scalar_value(mean);
            check_finite(raw, "stage-1", step)?;
            let grads = tape.backward(mean);
            (raw, ctx.grads(&grads))
        };
        adam.step(&mut store, &gmap);
        let (_, lines) = total_loss(step, &[("simple", raw, cfg.train.weights.simple)])?;
        facetalk_core::losses::write_loss_lines(&mut report, &lines)?;
        all_lines.extend(lines);
        if step % cfg.train.checkpoint_every == 0 && step != cfg.train.stage1_steps {
            report.flush()?;
            save_checkpoint(&base, 1, step, cfg.train.seed, &cfg.hash(), &store)?;
        }
    }
    report.flush()?;

    assert_eq!(frozen_digest, ae.digest(), "autoencoder must stay frozen through training");
    save_checkpoint(&base, 1, cfg.train.stage1_steps, cfg.train.seed, &cfg.hash(), &store)?;
    Ok(StageReport::from_lines(
        1,
        cfg.train.stage1_steps.saturating_sub(start_step),
        base,
        all_lines,
    ))
}

/// Stage 2: train the audio-to-motion model, then fine-tune the denoiser
/// with full conditioning and the auxiliary losses.
pub fn train_stage2(
    cfg: &PipelineConfig,
    data_root: &Path,
    out_dir: &Path,
    stage1_base: &Path,
    resume: Option<&Path>,
) -> Result<StageReport> {
    cfg.validate()?;
    let records = load_dataset(data_root)?;
    if records.is_empty() {
        return Err(Error::invalid("dataset has no accepted clips"));
    }
    let ucfg = cfg.unet_config();
    let schedule = cfg.schedule()?;
    let media = load_media(data_root, &records)?;
    let predictors = SyntheticPredictors::new(3, cfg.dataset.height, cfg.dataset.width);

    let (mut store, start_step, resumed) = match resume {
        Some(base) => {
            let (manifest, store) = load_checkpoint(base)?;
            if manifest.stage != 2 {
                return Err(Error::Checkpoint(format!(
                    "resume expects a stage-2 checkpoint, found stage {}",
                    manifest.stage
                )));
            }
            if manifest.config_hash != cfg.hash() {
                return Err(Error::Checkpoint(
                    "resume checkpoint was produced by a different configuration".into(),
                ));
            }
            (store, manifest.step, true)
        }
        None => {
            let (manifest, store) = load_checkpoint(stage1_base)?;
            if manifest.stage != 1 {
                return Err(Error::Checkpoint(format!(
                    "stage 2 needs a stage-1 checkpoint, found stage {}",
                    manifest.stage
                )));
            }
            if manifest.config_hash != cfg.hash() {
                return Err(Error::Checkpoint(
                    "stage-1 checkpoint was produced by a different configuration".into(),
                ));
            }
            (store, 0, false)
        }
    };
    let ae = autoenc_from_store(cfg, &store)?;
    let frozen_digest = ae.digest();
    let clips = prepare_clips(cfg, media, &ae, &predictors)?;
    let a2m = A2M::new(cfg.a2m_config())?;
    let f = ucfg.frames;
    let d = ucfg.latent_dim();

    // Phase A: audio-to-motion. Already done when resuming phase B.
    if !resumed {
        let mut adam = Adam::new(cfg.train.a2m_learning_rate);
        let mut report = open_report(out_dir, "a2m_losses.jsonl", false)?;
        for step in 1..=cfg.train.a2m_steps {
            let batch = draw_batch(&clips, cfg, PHASE_A2M, step)?;
            let beta = annealed_beta(cfg.a2m.kl_beta, step, cfg.train.a2m_steps);
            let (raw_mse, raw_kl, gmap) = {
                let tape = Tape::new();
                let mut ctx = Ctx::new(&tape, &mut store);
                let mut totals = Vec::new();
                let (mut mse_sum, mut kl_sum) = (0.0, 0.0);
                for (lane, draw) in batch.iter().enumerate() {
                    let motion = tape.constant(rows(&draw.clip.latents, draw.window_start, f));
                    let audio = tape.constant(rows(&draw.clip.features, draw.window_start, f));
                    let ref_cond = tape.constant(one_row(&draw.clip.latents, draw.ref_idx));
                    let (loss, mse, kl) = a2m.train_loss(
                        &mut ctx,
                        motion,
                        audio,
                        ref_cond,
                        beta,
                        cfg.train.seed,
                        &[PHASE_A2M, step, lane as u64],
                    )?;
                    mse_sum += tape.scalar_value(mse);
                    kl_sum += tape.scalar_value(kl);
                    totals.push(loss);
                }
                let sum = totals.into_iter().reduce(|a, b| tape.add(a, b)).expect("batch");
                let mean = tape.scale(sum, 1.0 / batch.len() as f64);
                let raw = tape.scalar_value(mean);
                check_finite(raw, "audio-to-motion", step)?;
                let grads = tape.backward(mean);
                let n = batch.len() as f64;
                (mse_sum / n, kl_sum / n, ctx.grads(&grads))
            };
            adam.step(&mut store, &gmap);
            let (_, lines) =
                total_loss(step, &[("a2m_recon", raw_mse, 1.0), ("a2m_kl", raw_kl, beta)])?;
            facetalk_core::losses::write_loss_lines(&mut report, &lines)?;
        }
        report.flush()?;
    }

    // Phase B: diffusion with full conditioning and auxiliary losses.
    let w = cfg.train.weights;
    let seg = segment_pool_matrix(cfg.emotion.k_fixed, f);
    let mut adam = Adam::new(cfg.train.learning_rate);
    let mut report = open_report(out_dir, "stage2_losses.jsonl", resumed)?;
    let mut all_lines = Vec::new();
    let base = out_dir.join("stage2");
    let sr = cfg.dataset.sample_rate as f64;
    let fps = cfg.dataset.fps;

    for step in start_step + 1..=cfg.train.stage2_steps {
        let batch = draw_batch(&clips, cfg, PHASE_STAGE2, step)?;
        let (raws, gmap) = {
            let tape = Tape::new();
            let mut ctx = Ctx::new(&tape, &mut store);
            let mut totals = Vec::new();
            let mut raw_sums = [0.0f64; 5]; // sync, emo, au, attr, simple
            for (lane, draw) in batch.iter().enumerate() {
                let clip = draw.clip;
                let start = draw.window_start;
                let t = draw_timestep(cfg, PHASE_STAGE2, step, lane as u64, schedule.t_max());
                let eps = draw_noise(cfg, PHASE_STAGE2, step, lane as u64, (f, d));
                let x0 = rows(&clip.latents, start, f);
                let x_t = add_noise(&x0, t, &eps, &schedule)?;
                let ref_latent = one_row(&clip.latents, draw.ref_idx);
                let refs = referencenet_forward(&mut ctx, &ucfg, &ref_latent, &clip.text_tokens)?;
                let audio_rows = rows(&clip.features, start, f);
                let (mctx, _) = motion_context(&clip.latents, start, ucfg.motion_len);
                let cond = CondInputs {
                    ref_features: refs,
                    text: &clip.text_tokens,
                    emotion: Some(&clip.emotion),
                    audio: Some(&audio_rows),
                    motion: Some(&mctx),
                    temporal: true,
                };
                let x_t_var = tape.constant(x_t);
                let eps_hat = unet_forward(&mut ctx, &ucfg, x_t_var, t, &cond)?;
                let eps_var = tape.constant(eps);
                let simple = tape.mse(eps_hat, eps_var);

                // Single-step clean estimate, decoded to pixel rows.
                let ab = schedule.alpha_bar(t);
                let scaled = tape.scale(eps_hat, -(1.0 - ab).sqrt());
                let x0_hat = tape.scale(tape.add(x_t_var, scaled), 1.0 / ab.sqrt());
                let decoded = ae.decode_t(&tape, x0_hat);

                // Sync: tape estimate on decoded frames vs the plain estimate
                // on the real window.
                let window_video =
                    VideoTensor::new(rows(&clip.video.data, start, f), 3, clip.video.h, clip.video.w)?;
                let s0 = (start as f64 * sr / fps).round() as usize;
                let s1 = ((start + f) as f64 * sr / fps).round() as usize;
                let window_audio = AudioClip::new(
                    clip.audio.samples[s0..s1.min(clip.audio.samples.len())].to_vec(),
                    cfg.dataset.sample_rate,
                )?;
                let gt_sync = predictors.sync_estimate(&window_video, &window_audio)?;
                let mut env = window_audio.envelope(fps);
                env.resize(f, env.last().copied().unwrap_or(0.0));
                let mouth = predictors.mouth_track_t(&tape, decoded);
                let (dt_p, t_p) = predictors.sync_estimate_t(&tape, mouth, &env);
                let l_sync = sync_loss_t(&tape, dt_p, t_p, &gt_sync);

                // Emotion: segment-pooled video VA vs the clip's audio VA.
                let va_rows = predictors.va_rows_t(&tape, decoded);
                let seg_m = tape.constant(seg.clone());
                let va_segments = tape.matmul(seg_m, va_rows);
                let l_emo = emo_loss_t(&tape, va_segments, &clip.va_gt)?;

                // Action units: per-frame detector rows vs the real frames'.
                let au_pred = predictors.au_rows_t(&tape, decoded);
                let au_gt = AUMatrix::new(rows(&clip.au_values, start, f), clip.au_ids.clone())?;
                let l_au = au_loss_t(&tape, au_pred, &au_gt)?;

                // Attribute/action: captioner probe vs the caption embedding.
                let cap_pred = predictors.caption_embed_t(&tape, decoded);
                let l_attr = attr_action_loss_t(&tape, cap_pred, &clip.caption_gt)?;

                for (slot, var) in [l_sync, l_emo, l_au, l_attr, simple].iter().enumerate() {
                    raw_sums[slot] += tape.scalar_value(*var);
                }
                let item = total_loss_t(
                    &tape,
                    &[
                        ("sync", l_sync, w.sync),
                        ("emo", l_emo, w.emo),
                        ("au", l_au, w.au),
                        ("attr", l_attr, w.attr),
                        ("simple", simple, w.simple),
                    ],
                )?;
                totals.push(item);
            }
            let sum = totals.into_iter().reduce(|a, b| tape.add(a, b)).expect("batch");
            let mean = tape.scale(sum, 1.0 / batch.len() as f64);
            let raw = tape.scalar_value(mean);
            check_finite(raw, "stage-2", step)?;
            let grads = tape.backward(mean);
            let n = batch.len() as f64;
            raw_sums.iter_mut().for_each(|v| *v /= n);
            (raw_sums, ctx.grads(&grads))
        };
        adam.step(&mut store, &gmap);
        let (_, lines) = total_loss(
            step,
            &[
                ("sync", raws[0], w.sync),
                ("emo", raws[1], w.emo),
                ("au", raws[2], w.au),
                ("attr", raws[3], w.attr),
                ("simple", raws[4], w.simple),
            ],
        )?;
        facetalk_core::losses::write_loss_lines(&mut report, &lines)?;
        all_lines.extend(lines);
        if step % cfg.train.checkpoint_every == 0 && step != cfg.train.stage2_steps {
            report.flush()?;
            save_checkpoint(&base, 2, step, cfg.train.seed, &cfg.hash(), &store)?;
        }
    }
    report.flush()?;

    assert_eq!(frozen_digest, ae.digest(), "autoencoder must stay frozen through stage 2");
    save_checkpoint(&base, 2, cfg.train.stage2_steps, cfg.train.seed, &cfg.hash(), &store)?;
    Ok(StageReport::from_lines(
        2,
        cfg.train.stage2_steps.saturating_sub(start_step),
        base,
        all_lines,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ingest_dataset, write_raw_clip, RawMeta};
    use facetalk_core::synth::generate_clip;
    use tempfile::TempDir;

    /// 1.2 s clips, tiny step counts; everything else default.
    fn tiny_cfg(steps1: u64, steps2: u64, a2m: u64) -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.dataset.min_duration_s = 0.8;
        cfg.train.stage1_steps = steps1;
        cfg.train.stage2_steps = steps2;
        cfg.train.a2m_steps = a2m;
        cfg.train.batch_size = 1;
        cfg
    }

    fn tiny_dataset(tmp: &TempDir, n: u64) -> std::path::PathBuf {
        let raw = tmp.path().join("raw");
        for i in 0..n {
            let clip = generate_clip(21, i, 1.2, 32, 32).unwrap();
            write_raw_clip(
                &raw.join(&clip.id),
                &clip.video,
                &clip.audio,
                &clip.caption,
                &RawMeta::default(),
            )
            .unwrap();
        }
        let data = tmp.path().join("data");
        let cfg = tiny_cfg(1, 1, 1);
        let summary = ingest_dataset(&raw, &data, &cfg.dataset).unwrap();
        assert_eq!(summary.accepted.len(), n as usize);
        data
    }

    #[test]
    fn stage1_runs_logs_and_checkpoints() {
        let tmp = TempDir::new().unwrap();
        let data = tiny_dataset(&tmp, 2);
        let cfg = tiny_cfg(3, 1, 1);
        let out = tmp.path().join("run");
        let report = train_stage1(&cfg, &data, &out, None).unwrap();
        assert_eq!(report.steps_run, 3);
        assert_eq!(report.lines.iter().map(|l| l.step).min(), Some(1));
        assert!(report.first_total.is_finite() && report.last_total.is_finite());

        let (manifest, store) = load_checkpoint(&report.checkpoint).unwrap();
        assert_eq!(manifest.stage, 1);
        assert_eq!(manifest.step, 3);
        assert_eq!(manifest.config_hash, cfg.hash());
        let names = store.names();
        assert!(names.iter().any(|n| n.starts_with("unet.")));
        assert!(names.iter().any(|n| n.starts_with("refnet.")));
        assert!(names.iter().any(|n| n.starts_with("autoenc.")));
        assert!(!names.iter().any(|n| n.starts_with("a2m.")));

        let log = std::fs::read_to_string(out.join("stage1_losses.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 3);
    }

    #[test]
    fn stage1_is_bitwise_deterministic() {
        let tmp = TempDir::new().unwrap();
        let data = tiny_dataset(&tmp, 2);
        let cfg = tiny_cfg(2, 1, 1);
        let out_a = tmp.path().join("a");
        let out_b = tmp.path().join("b");
        train_stage1(&cfg, &data, &out_a, None).unwrap();
        train_stage1(&cfg, &data, &out_b, None).unwrap();
        assert_eq!(
            std::fs::read(out_a.join("stage1.bin")).unwrap(),
            std::fs::read(out_b.join("stage1.bin")).unwrap()
        );
        assert_eq!(
            std::fs::read(out_a.join("stage1_losses.jsonl")).unwrap(),
            std::fs::read(out_b.join("stage1_losses.jsonl")).unwrap()
        );
    }

    #[test]
    fn stage1_resume_checks_config_and_continues_partial_runs() {
        let tmp = TempDir::new().unwrap();
        let data = tiny_dataset(&tmp, 2);
        let out = tmp.path().join("run");
        let cfg = tiny_cfg(2, 1, 1);
        let report = train_stage1(&cfg, &data, &out, None).unwrap();

        // A checkpoint from a different configuration is rejected.
        let mut other = cfg.clone();
        other.train.stage1_steps = 4;
        let err = train_stage1(&other, &data, &out, Some(&report.checkpoint)).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");

        // Same config, already at the target: no further steps run.
        let again = train_stage1(&cfg, &data, &out, Some(&report.checkpoint)).unwrap();
        assert_eq!(again.steps_run, 0);
        assert!(again.lines.is_empty());

        // A partial checkpoint (as the periodic saver would leave after a
        // crash) picks up at the next step and finishes the stage. The
        // parameters after two steps do not depend on the step target, so a
        // 2-step store stands in for an interrupted 4-step run.
        let (_, store) = load_checkpoint(&report.checkpoint).unwrap();
        let partial = out.join("crashed").join("stage1");
        save_checkpoint(&partial, 1, 2, other.train.seed, &other.hash(), &store).unwrap();
        let resumed =
            train_stage1(&other, &data, &out.join("crashed"), Some(&partial)).unwrap();
        assert_eq!(resumed.steps_run, 2);
        assert_eq!(resumed.lines.iter().map(|l| l.step).min(), Some(3));
        let (manifest, _) = load_checkpoint(&resumed.checkpoint).unwrap();
        assert_eq!(manifest.step, 4);
    }

    #[test]
    fn stage2_needs_a_stage1_checkpoint() {
        let tmp = TempDir::new().unwrap();
        let data = tiny_dataset(&tmp, 2);
        let cfg = tiny_cfg(1, 1, 1);
        let err = train_stage2(&cfg, &data, &tmp.path().join("o"), &tmp.path().join("missing"), None)
            .unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }

    #[test]
    fn stage2_trains_a2m_and_aux_losses() {
        let tmp = TempDir::new().unwrap();
        let data = tiny_dataset(&tmp, 2);
        let cfg = tiny_cfg(2, 2, 2);
        let out = tmp.path().join("run");
        let s1 = train_stage1(&cfg, &data, &out, None).unwrap();
        let report = train_stage2(&cfg, &data, &out, &s1.checkpoint, None).unwrap();
        assert_eq!(report.steps_run, 2);

        let components: Vec<&str> = report
            .lines
            .iter()
            .filter(|l| l.step == 1)
            .map(|l| l.component.as_str())
            .collect();
        assert_eq!(components, vec!["sync", "emo", "au", "attr", "simple"]);
        assert!(report.lines.iter().all(|l| l.raw.is_finite()));

        let (manifest, store) = load_checkpoint(&report.checkpoint).unwrap();
        assert_eq!(manifest.stage, 2);
        assert!(store.names().iter().any(|n| n.starts_with("a2m.")));

        let a2m_log = std::fs::read_to_string(out.join("a2m_losses.jsonl")).unwrap();
        assert_eq!(a2m_log.lines().count(), 4); // 2 steps x 2 components
    }

    #[test]
    fn zero_aux_weights_match_a_simple_only_loop_bitwise() {
        let tmp = TempDir::new().unwrap();
        let data = tiny_dataset(&tmp, 2);
        let mut cfg = tiny_cfg(1, 3, 1);
        cfg.train.weights.sync = 0.0;
        cfg.train.weights.emo = 0.0;
        cfg.train.weights.au = 0.0;
        cfg.train.weights.attr = 0.0;
        let out = tmp.path().join("run");
        let s1 = train_stage1(&cfg, &data, &out, None).unwrap();
        let s2 = train_stage2(&cfg, &data, &out, &s1.checkpoint, None).unwrap();
        let (_, trained) = load_checkpoint(&s2.checkpoint).unwrap();

        // Reference loop: same draws, same conditioning, but the loss is
        // only the noise-prediction term — no aux graph at all.
        let (_, mut store) = load_checkpoint(&s1.checkpoint).unwrap();
        let ae = autoenc_from_store(&cfg, &store).unwrap();
        let predictors = SyntheticPredictors::new(3, 32, 32);
        let records = load_dataset(&data).unwrap();
        let media = load_media(&data, &records).unwrap();
        let clips = prepare_clips(&cfg, media, &ae, &predictors).unwrap();
        let ucfg = cfg.unet_config();
        let schedule = cfg.schedule().unwrap();
        let (f, d) = (ucfg.frames, ucfg.latent_dim());
        let mut adam = Adam::new(cfg.train.learning_rate);
        for step in 1..=cfg.train.stage2_steps {
            let batch = draw_batch(&clips, &cfg, PHASE_STAGE2, step).unwrap();
            let gmap = {
                let tape = Tape::new();
                let mut ctx = Ctx::new(&tape, &mut store);
                let mut totals = Vec::new();
                for (lane, draw) in batch.iter().enumerate() {
                    let t = draw_timestep(&cfg, PHASE_STAGE2, step, lane as u64, schedule.t_max());
                    let eps = draw_noise(&cfg, PHASE_STAGE2, step, lane as u64, (f, d));
                    let x0 = rows(&draw.clip.latents, draw.window_start, f);
                    let x_t = add_noise(&x0, t, &eps, &schedule).unwrap();
                    let refs = referencenet_forward(
                        &mut ctx,
                        &ucfg,
                        &one_row(&draw.clip.latents, draw.ref_idx),
                        &draw.clip.text_tokens,
                    )
                    .unwrap();
                    let audio_rows = rows(&draw.clip.features, draw.window_start, f);
                    let (mctx, _) =
                        motion_context(&draw.clip.latents, draw.window_start, ucfg.motion_len);
                    let cond = CondInputs {
                        ref_features: refs,
                        text: &draw.clip.text_tokens,
                        emotion: Some(&draw.clip.emotion),
                        audio: Some(&audio_rows),
                        motion: Some(&mctx),
                        temporal: true,
                    };
                    let x_t_var = tape.constant(x_t);
                    let eps_hat = unet_forward(&mut ctx, &ucfg, x_t_var, t, &cond).unwrap();
                    let eps_var = tape.constant(eps);
                    totals.push(tape.mse(eps_hat, eps_var));
                }
                let sum = totals.into_iter().reduce(|a, b| tape.add(a, b)).unwrap();
                let mean = tape.scale(sum, 1.0 / batch.len() as f64);
                let grads = tape.backward(mean);
                ctx.grads(&grads)
            };
            adam.step(&mut store, &gmap);
        }

        for name in trained.names() {
            if name.starts_with("unet.") || name.starts_with("refnet.") {
                let a = trained.get(&name).unwrap();
                let b = store.get(&name).unwrap();
                // The checkpointed copy went through f32; compare at that
                // precision, which is still exact equality of rounded bits.
                let b32 = b.mapv(|v| v as f32 as f64);
                assert_eq!(a, &b32, "{name} diverged under zero aux weights");
            }
        }
    }

    #[test]
    fn runaway_learning_rate_aborts_with_step_number() {
        let tmp = TempDir::new().unwrap();
        let data = tiny_dataset(&tmp, 2);
        let mut cfg = tiny_cfg(40, 1, 1);
        cfg.train.learning_rate = 1e18;
        let err = train_stage1(&cfg, &data, &tmp.path().join("run"), None).unwrap_err();
        match err {
            Error::NonFinite(msg) => assert!(msg.contains("step"), "{msg}"),
            other => panic!("expected NonFinite, got {other}"),
        }
    }
}
