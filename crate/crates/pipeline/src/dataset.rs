//! Clip records, raw-to-standard ingest, and training-window sampling.
//!
//! A raw clip is a directory with `frames/*.png`, `audio.wav`, `caption.txt`
//! and an optional `meta.json` sidecar. Ingest standardizes each clip to the
//! dataset's fps and sample rate (nearest-frame video resampling, linear
//! audio resampling, peak normalization), filters out contract violations
//! with a recorded reason, and writes the same layout plus a `record.json`
//! into the output root. Standardization is idempotent: ingesting an already
//! standardized clip reproduces it byte for byte.

use std::path::{Path, PathBuf};

use facetalk_core::audio::{read_wav, write_wav, AudioClip};
use facetalk_core::video::VideoTensor;
use facetalk_core::{Error, Result};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::DatasetSection;

/// Optional sidecar for raw clips; absent fields and files take defaults.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RawMeta {
    pub fps: f64,
    /// Whether landmark extraction succeeded upstream.
    pub landmark_ok: bool,
    /// Whether the clip contains exactly one speaker.
    pub single_speaker: bool,
}

impl Default for RawMeta {
    fn default() -> Self {
        Self { fps: 25.0, landmark_ok: true, single_speaker: true }
    }
}

/// One standardized dataset entry. Paths are relative to the dataset root so
/// records are portable and byte-stable across machines.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClipRecord {
    pub id: String,
    pub frames_path: PathBuf,
    pub audio_path: PathBuf,
    pub caption: String,
    pub duration_s: f64,
    pub fps: f64,
    pub sample_rate: u32,
    pub n_frames: usize,
    pub landmark_ok: bool,
    pub single_speaker: bool,
}

/// A clip that failed ingest, with the reason it was dropped.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RejectedClip {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct IngestSummary {
    pub accepted: Vec<ClipRecord>,
    pub rejected: Vec<RejectedClip>,
}

/// Write one clip in the raw layout (as produced by data generation).
pub fn write_raw_clip(
    dir: &Path,
    video: &VideoTensor,
    audio: &AudioClip,
    caption: &str,
    meta: &RawMeta,
) -> Result<()> {
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir)?;
    for f in 0..video.num_frames() {
        video.save_frame_png(f, &frames_dir.join(format!("{f:06}.png")))?;
    }
    write_wav(audio, &dir.join("audio.wav"))?;
    std::fs::write(dir.join("caption.txt"), caption)?;
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

/// Nearest-frame resampling to `tgt_fps`; identity when the rates match.
pub fn resample_frames(video: &VideoTensor, src_fps: f64, tgt_fps: f64) -> Result<VideoTensor> {
    if src_fps <= 0.0 || tgt_fps <= 0.0 {
        return Err(Error::invalid(format!("frame rates {src_fps}/{tgt_fps} must be positive")));
    }
    let n_src = video.num_frames();
    let n_tgt = ((n_src as f64 * tgt_fps / src_fps).round() as usize).max(1);
    let step = src_fps / tgt_fps;
    let mut data = Array2::zeros((n_tgt, video.data.ncols()));
    for i in 0..n_tgt {
        let src = ((i as f64 * step).round() as usize).min(n_src - 1);
        data.row_mut(i).assign(&video.data.row(src));
    }
    VideoTensor::new(data, video.c, video.h, video.w)
}

/// Trim or zero-pad so the audio spans exactly `n_frames` video frames.
fn fit_audio_to_frames(clip: &AudioClip, n_frames: usize, fps: f64) -> Result<AudioClip> {
    let target = (n_frames as f64 * clip.sample_rate as f64 / fps).round() as usize;
    let mut samples = clip.samples.clone();
    samples.resize(target, 0.0);
    AudioClip::new(samples, clip.sample_rate)
}

fn reject(reason: impl Into<String>) -> Error {
    Error::Rejected(reason.into())
}

/// Standardize one raw clip directory into `out_root/<id>/`. Contract
/// violations come back as [`Error::Rejected`]; anything else is a real
/// failure.
pub fn ingest_clip(raw_dir: &Path, out_root: &Path, opts: &DatasetSection) -> Result<ClipRecord> {
    let id = raw_dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::invalid(format!("clip path {} has no name", raw_dir.display())))?
        .to_string();

    let meta: RawMeta = match std::fs::read_to_string(raw_dir.join("meta.json")) {
        Ok(text) => serde_json::from_str(&text)?,
        Err(_) => RawMeta::default(),
    };
    if !meta.landmark_ok {
        return Err(reject("landmark verification failed"));
    }
    if !meta.single_speaker {
        return Err(reject("multiple speakers detected"));
    }
    let caption = std::fs::read_to_string(raw_dir.join("caption.txt"))
        .map_err(|_| reject("missing caption.txt"))?
        .trim()
        .to_string();

    let video = VideoTensor::load_frames_dir(&raw_dir.join("frames"))
        .map_err(|e| reject(format!("unreadable frames: {e}")))?;
    if (video.h, video.w) != (opts.height, opts.width) {
        return Err(reject(format!(
            "frame size {}x{} does not match dataset {}x{}",
            video.h, video.w, opts.height, opts.width
        )));
    }
    let audio = read_wav(&raw_dir.join("audio.wav"))
        .map_err(|e| reject(format!("unreadable audio: {e}")))?;

    let video_dur = video.num_frames() as f64 / meta.fps;
    let audio_dur = audio.duration_s();
    if (video_dur - audio_dur).abs() > 1.5 / opts.fps {
        return Err(reject(format!(
            "audio/video duration mismatch: {audio_dur:.2}s vs {video_dur:.2}s"
        )));
    }
    if video_dur < opts.min_duration_s {
        return Err(reject(format!(
            "duration {video_dur:.2}s below minimum {:.2}s",
            opts.min_duration_s
        )));
    }
    if video_dur > opts.max_duration_s {
        return Err(reject(format!(
            "duration {video_dur:.2}s above maximum {:.2}s",
            opts.max_duration_s
        )));
    }

    let video = resample_frames(&video, meta.fps, opts.fps)?;
    let n_frames = video.num_frames();
    let audio = audio.resample(opts.sample_rate)?.peak_normalize();
    let audio = fit_audio_to_frames(&audio, n_frames, opts.fps)?;

    let clip_dir = out_root.join(&id);
    let frames_dir = clip_dir.join("frames");
    std::fs::create_dir_all(&frames_dir)?;
    for f in 0..n_frames {
        video.save_frame_png(f, &frames_dir.join(format!("{f:06}.png")))?;
    }
    write_wav(&audio, &clip_dir.join("audio.wav"))?;
    std::fs::write(clip_dir.join("caption.txt"), &caption)?;

    let record = ClipRecord {
        id: id.clone(),
        frames_path: PathBuf::from(&id).join("frames"),
        audio_path: PathBuf::from(&id).join("audio.wav"),
        caption,
        duration_s: n_frames as f64 / opts.fps,
        fps: opts.fps,
        sample_rate: opts.sample_rate,
        n_frames,
        landmark_ok: meta.landmark_ok,
        single_speaker: meta.single_speaker,
    };
    std::fs::write(clip_dir.join("record.json"), serde_json::to_string_pretty(&record)?)?;
    Ok(record)
}

/// Ingest every subdirectory of `in_root` (sorted by name) and write an
/// `index.json` of the accepted records into `out_root`.
pub fn ingest_dataset(
    in_root: &Path,
    out_root: &Path,
    opts: &DatasetSection,
) -> Result<IngestSummary> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(in_root)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut summary = IngestSummary::default();
    for dir in dirs {
        match ingest_clip(&dir, out_root, opts) {
            Ok(record) => summary.accepted.push(record),
            Err(Error::Rejected(reason)) => summary.rejected.push(RejectedClip {
                id: dir.file_name().and_then(|n| n.to_str()).unwrap_or("?").to_string(),
                reason,
            }),
            Err(e) => return Err(e),
        }
    }
    std::fs::create_dir_all(out_root)?;
    std::fs::write(
        out_root.join("index.json"),
        serde_json::to_string_pretty(&summary.accepted)?,
    )?;
    Ok(summary)
}

/// Load the accepted records of an ingested dataset.
pub fn load_dataset(root: &Path) -> Result<Vec<ClipRecord>> {
    let text = std::fs::read_to_string(root.join("index.json"))
        .map_err(|e| Error::Config(format!("no dataset index in {}: {e}", root.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Load the media behind one record.
pub fn load_clip_media(root: &Path, record: &ClipRecord) -> Result<(VideoTensor, AudioClip)> {
    let video = VideoTensor::load_frames_dir(&root.join(&record.frames_path))?;
    let audio = read_wav(&root.join(&record.audio_path))?;
    Ok((video, audio))
}

/// One training draw: a reference frame plus a target-window placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingSample {
    pub ref_idx: usize,
    pub window_start: usize,
}

/// Draw a reference frame (uniform over the clip) and a contiguous target
/// window with full motion context: starts below `motion_len` are never
/// drawn, so every context frame is real. The reference is drawn first.
pub fn sample_training_clip(
    n_frames: usize,
    frames_per_window: usize,
    motion_len: usize,
    rng: &mut impl Rng,
) -> Result<TrainingSample> {
    if n_frames < frames_per_window + motion_len {
        return Err(Error::invalid(format!(
            "record with {n_frames} frames cannot hold a {frames_per_window}-frame window \
             plus {motion_len} context frames"
        )));
    }
    let ref_idx = rng.gen_range(0..n_frames);
    let window_start = rng.gen_range(motion_len..=n_frames - frames_per_window);
    Ok(TrainingSample { ref_idx, window_start })
}

/// The `motion_len` latent rows preceding `window_start`, zero-padded (and
/// flagged) when the window sits closer than that to the sequence start.
pub fn motion_context(
    latents: &Array2<f64>,
    window_start: usize,
    motion_len: usize,
) -> (Array2<f64>, bool) {
    let d = latents.ncols();
    let mut out = Array2::zeros((motion_len, d));
    let mut padded = false;
    for k in 0..motion_len {
        let idx = window_start as i64 - motion_len as i64 + k as i64;
        if idx < 0 {
            padded = true;
        } else {
            out.row_mut(k).assign(&latents.row(idx as usize));
        }
    }
    (out, padded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use facetalk_core::rng::derive_rng;
    use facetalk_core::synth::generate_clip;

    #[test]
    fn nearest_frame_resample_is_exact_on_the_worked_case() {
        // 6 s at 30 fps -> 180 source frames -> 150 at 25 fps.
        let data = Array2::from_shape_fn((180, 3 * 16 * 16), |(i, _)| i as f64 / 255.0);
        let v = VideoTensor::new(data, 3, 16, 16).unwrap();
        let out = resample_frames(&v, 30.0, 25.0).unwrap();
        assert_eq!(out.num_frames(), 150);
        // Frame i samples source round(1.2 i).
        assert_eq!(out.data[(1, 0)], 1.0 / 255.0);
        assert_eq!(out.data[(2, 0)], 2.0 / 255.0);
        assert_eq!(out.data[(3, 0)], 4.0 / 255.0);
        assert_eq!(out.data[(149, 0)], 179.0 / 255.0);

        let same = resample_frames(&v, 25.0, 25.0).unwrap();
        assert_eq!(same.data, v.data);
    }

    #[test]
    fn sixteen_frame_record_forces_window_start_two() {
        let mut rng = derive_rng(1, &[]);
        for _ in 0..50 {
            let s = sample_training_clip(16, 14, 2, &mut rng).unwrap();
            assert_eq!(s.window_start, 2);
            assert!(s.ref_idx < 16);
        }
        // One frame short of window + context.
        assert!(sample_training_clip(15, 14, 2, &mut rng).is_err());
    }

    #[test]
    fn motion_context_zero_pads_below_the_boundary() {
        let latents = Array2::from_shape_fn((6, 4), |(i, j)| (i * 10 + j) as f64);
        let (ctx, padded) = motion_context(&latents, 2, 2);
        assert!(!padded);
        assert_eq!(ctx.row(0).to_vec(), vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(ctx.row(1).to_vec(), vec![10.0, 11.0, 12.0, 13.0]);

        let (ctx, padded) = motion_context(&latents, 1, 2);
        assert!(padded);
        assert_eq!(ctx.row(0).to_vec(), vec![0.0; 4]);
        assert_eq!(ctx.row(1).to_vec(), vec![0.0, 1.0, 2.0, 3.0]);

        let (ctx, padded) = motion_context(&latents, 0, 2);
        assert!(padded);
        assert!(ctx.iter().all(|&v| v == 0.0));
    }

    fn tiny_opts() -> DatasetSection {
        DatasetSection { min_duration_s: 0.8, ..DatasetSection::default() }
    }

    #[test]
    fn ingest_standardizes_and_is_idempotent() {
        let tmp = tempfile::tempdir().unwrap();
        let clip = generate_clip(11, 0, 1.2, 32, 32).unwrap();
        let raw = tmp.path().join("raw").join(&clip.id);
        write_raw_clip(&raw, &clip.video, &clip.audio, &clip.caption, &RawMeta::default())
            .unwrap();

        let out1 = tmp.path().join("pass1");
        let rec = ingest_clip(&raw, &out1, &tiny_opts()).unwrap();
        assert_eq!(rec.n_frames, 30);
        assert_eq!(rec.fps, 25.0);
        assert_eq!(rec.sample_rate, 16_000);
        assert!((rec.duration_s - 1.2).abs() < 1e-12);
        assert_eq!(rec.frames_path, PathBuf::from(&clip.id).join("frames"));

        // The standardized layout is itself a valid raw clip (meta defaults
        // apply); a second pass must reproduce it byte for byte.
        let out2 = tmp.path().join("pass2");
        let rec2 = ingest_clip(&out1.join(&clip.id), &out2, &tiny_opts()).unwrap();
        assert_eq!(rec2, rec);
        for f in 0..rec.n_frames {
            let name = format!("{f:06}.png");
            let a = std::fs::read(out1.join(&clip.id).join("frames").join(&name)).unwrap();
            let b = std::fs::read(out2.join(&clip.id).join("frames").join(&name)).unwrap();
            assert_eq!(a, b, "frame {f} changed under re-ingest");
        }
        let a = std::fs::read(out1.join(&clip.id).join("audio.wav")).unwrap();
        let b = std::fs::read(out2.join(&clip.id).join("audio.wav")).unwrap();
        assert_eq!(a, b, "audio changed under re-ingest");
    }

    #[test]
    fn ingest_rejects_contract_violations_with_reasons() {
        let tmp = tempfile::tempdir().unwrap();
        let clip = generate_clip(12, 0, 1.2, 32, 32).unwrap();
        let opts = tiny_opts();

        // Landmark failure.
        let raw = tmp.path().join("a");
        let meta = RawMeta { landmark_ok: false, ..RawMeta::default() };
        write_raw_clip(&raw, &clip.video, &clip.audio, &clip.caption, &meta).unwrap();
        let err = ingest_clip(&raw, &tmp.path().join("out"), &opts).unwrap_err();
        assert!(matches!(&err, Error::Rejected(r) if r.contains("landmark")), "{err}");

        // Second speaker.
        let raw = tmp.path().join("b");
        let meta = RawMeta { single_speaker: false, ..RawMeta::default() };
        write_raw_clip(&raw, &clip.video, &clip.audio, &clip.caption, &meta).unwrap();
        let err = ingest_clip(&raw, &tmp.path().join("out"), &opts).unwrap_err();
        assert!(matches!(&err, Error::Rejected(r) if r.contains("speaker")), "{err}");

        // Too short for the default bounds.
        let raw = tmp.path().join("c");
        write_raw_clip(&raw, &clip.video, &clip.audio, &clip.caption, &RawMeta::default())
            .unwrap();
        let err = ingest_clip(&raw, &tmp.path().join("out"), &DatasetSection::default())
            .unwrap_err();
        assert!(matches!(&err, Error::Rejected(r) if r.contains("below minimum")), "{err}");

        // Missing caption.
        let raw = tmp.path().join("d");
        write_raw_clip(&raw, &clip.video, &clip.audio, &clip.caption, &RawMeta::default())
            .unwrap();
        std::fs::remove_file(raw.join("caption.txt")).unwrap();
        let err = ingest_clip(&raw, &tmp.path().join("out"), &opts).unwrap_err();
        assert!(matches!(&err, Error::Rejected(r) if r.contains("caption")), "{err}");
    }

    #[test]
    fn dataset_index_lists_accepted_sorted_and_skips_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let raw_root = tmp.path().join("raw");
        for (i, bad) in [(0u64, false), (1, true), (2, false)] {
            let clip = generate_clip(13, i, 1.2, 32, 32).unwrap();
            let meta = RawMeta { landmark_ok: !bad, ..RawMeta::default() };
            write_raw_clip(
                &raw_root.join(&clip.id),
                &clip.video,
                &clip.audio,
                &clip.caption,
                &meta,
            )
            .unwrap();
        }
        let out = tmp.path().join("out");
        let summary = ingest_dataset(&raw_root, &out, &tiny_opts()).unwrap();
        assert_eq!(summary.accepted.len(), 2);
        assert_eq!(summary.rejected.len(), 1);
        let loaded = load_dataset(&out).unwrap();
        assert_eq!(loaded, summary.accepted);
        let (video, audio) = load_clip_media(&out, &loaded[0]).unwrap();
        assert_eq!(video.num_frames(), loaded[0].n_frames);
        assert_eq!(audio.sample_rate, 16_000);
    }
}
