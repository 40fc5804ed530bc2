//! Audio clips: WAV I/O, resampling, normalization, and the overlapping
//! segmentation the emotion embedding is built on.

use std::path::Path;

use crate::error::{Error, Result};

/// Canonical sample rate every clip is standardized to before training.
pub const CANONICAL_SAMPLE_RATE: u32 = 16_000;

/// Video frames covering `duration_s` at `fps`: `ceil(duration * fps)`, with
/// a one-nanoframe tolerance so a duration that is an exact frame multiple
/// never rounds up through float noise (e.g. 0.56 s at 25 fps is 14 frames,
/// not 15, even though `0.56 * 25.0 > 14.0` in f64).
pub fn frames_for_duration(duration_s: f64, fps: f64) -> usize {
    (duration_s * fps - 1e-9).ceil().max(0.0) as usize
}

/// Mono audio at a known sample rate. Samples live in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("audio clip sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("audio clip contains non-finite samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Linear-interpolation resample to `target_rate`. A no-op when the rate
    /// already matches.
    pub fn resample(&self, target_rate: u32) -> Result<AudioClip> {
        if target_rate == 0 {
            return Err(Error::invalid("resample target rate must be positive"));
        }
        if target_rate == self.sample_rate || self.samples.is_empty() {
            return Ok(AudioClip { samples: self.samples.clone(), sample_rate: target_rate });
        }
        let n_out =
            ((self.samples.len() as f64) * target_rate as f64 / self.sample_rate as f64).round()
                as usize;
        let n_out = n_out.max(1);
        let mut out = Vec::with_capacity(n_out);
        let step = self.sample_rate as f64 / target_rate as f64;
        for i in 0..n_out {
            let pos = i as f64 * step;
            let lo = pos.floor() as usize;
            let frac = pos - lo as f64;
            let a = *self.samples.get(lo).unwrap_or(self.samples.last().unwrap());
            let b = *self.samples.get(lo + 1).unwrap_or(self.samples.last().unwrap());
            out.push(a + frac * (b - a));
        }
        AudioClip::new(out, target_rate)
    }

    /// Scale so the peak magnitude is exactly 1. Silence is left untouched.
    pub fn peak_normalize(&self) -> AudioClip {
        let peak = self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        if peak == 0.0 {
            return self.clone();
        }
        AudioClip {
            samples: self.samples.iter().map(|s| s / peak).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Mean absolute amplitude per video frame at `fps`, one value per frame
    /// for `ceil(duration * fps)` frames. This is the envelope the sync
    /// estimator and the synthetic mouth animation share.
    pub fn envelope(&self, fps: f64) -> Vec<f64> {
        if self.samples.is_empty() || fps <= 0.0 {
            return Vec::new();
        }
        let n_frames = frames_for_duration(self.duration_s(), fps);
        let per = self.sample_rate as f64 / fps;
        let mut out = Vec::with_capacity(n_frames);
        for f in 0..n_frames {
            let lo = (f as f64 * per).round() as usize;
            let hi = (((f + 1) as f64 * per).round() as usize).min(self.samples.len());
            let lo = lo.min(hi.saturating_sub(1));
            let slice = &self.samples[lo..hi.max(lo + 1).min(self.samples.len())];
            let mean_abs = if slice.is_empty() {
                0.0
            } else {
                slice.iter().map(|s| s.abs()).sum::<f64>() / slice.len() as f64
            };
            out.push(mean_abs);
        }
        out
    }
}

/// One segment of a clip together with its (start, end) span in seconds.
#[derive(Debug, Clone)]
pub struct AudioSegment {
    pub clip: AudioClip,
    pub span: (f64, f64),
}

/// Slice a clip into `window_s`-long segments with the given overlap fraction.
///
/// Segments start at multiples of `hop = window_s * (1 - overlap)`. A leftover
/// tail shorter than the window produces one final segment anchored at
/// `duration - window_s` (clamped to 0), and a clip shorter than the window
/// yields exactly one segment covering the whole clip.
pub fn segment_audio(clip: &AudioClip, window_s: f64, overlap: f64) -> Result<Vec<AudioSegment>> {
    if window_s <= 0.0 {
        return Err(Error::invalid(format!("segment window must be positive, got {window_s}")));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::invalid(format!("segment overlap must be in [0, 1), got {overlap}")));
    }
    if clip.is_empty() {
        return Err(Error::invalid("cannot segment an empty clip"));
    }
    let sr = clip.sample_rate as f64;
    let win = (window_s * sr).round() as usize;
    let hop = ((window_s * (1.0 - overlap)) * sr).round() as usize;
    let hop = hop.max(1);
    let len = clip.samples.len();

    let mut segments = Vec::new();
    let mut push = |start: usize, end: usize| {
        let seg = AudioClip {
            samples: clip.samples[start..end].to_vec(),
            sample_rate: clip.sample_rate,
        };
        segments.push(AudioSegment { clip: seg, span: (start as f64 / sr, end as f64 / sr) });
    };

    if len <= win {
        push(0, len);
        return Ok(segments);
    }
    let mut start = 0usize;
    let mut covered = 0usize;
    while start + win <= len {
        push(start, start + win);
        covered = start + win;
        start += hop;
    }
    if covered < len {
        // Nonzero tail: one final window anchored at the end of the clip.
        push(len - win, len);
    }
    Ok(segments)
}

/// Read a WAV file as a mono clip (channels averaged), samples scaled to
/// `[-1, 1]`.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::Media(format!("failed to open wav {}: {e}", path.display())))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Media(format!("wav {} has zero channels", path.display())));
    }
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Media(format!("wav {}: {e}", path.display())))?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Media(format!("wav {}: {e}", path.display())))?
        }
    };
    let mono: Vec<f64> = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    AudioClip::new(mono, spec.sample_rate)
}

/// Write a clip as mono float32 WAV.
pub fn write_wav(clip: &AudioClip, path: &Path) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::Media(format!("failed to create wav {}: {e}", path.display())))?;
    for &s in &clip.samples {
        writer
            .write_sample(s as f32)
            .map_err(|e| Error::Media(format!("wav write {}: {e}", path.display())))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::Media(format!("wav finalize {}: {e}", path.display())))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn const_clip(seconds: f64, value: f64, sr: u32) -> AudioClip {
        AudioClip::new(vec![value; (seconds * sr as f64).round() as usize], sr).unwrap()
    }

    #[test]
    fn segment_4s_window_2s_overlap_half() {
        let clip = const_clip(4.0, 0.5, 16_000);
        let segs = segment_audio(&clip, 2.0, 0.5).unwrap();
        assert_eq!(segs.len(), 3);
        let starts: Vec<f64> = segs.iter().map(|s| s.span.0).collect();
        assert_eq!(starts, vec![0.0, 1.0, 2.0]);
        for s in &segs {
            assert!((s.span.1 - s.span.0 - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn segment_exact_window_gives_one() {
        let clip = const_clip(2.0, 0.2, 16_000);
        let segs = segment_audio(&clip, 2.0, 0.5).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].span, (0.0, 2.0));
    }

    #[test]
    fn segment_short_clip_yields_whole() {
        let clip = const_clip(1.0, 0.2, 16_000);
        let segs = segment_audio(&clip, 2.0, 0.5).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].clip.samples.len(), clip.samples.len());
        assert_eq!(segs[0].span, (0.0, 1.0));
    }

    #[test]
    fn segment_tail_is_anchored_at_end() {
        // 4.5 s, window 2 s, hop 1 s: full windows at 0,1,2 cover up to 4.0 s,
        // leaving a 0.5 s tail -> final window anchored at 2.5 s.
        let clip = const_clip(4.5, 0.1, 16_000);
        let segs = segment_audio(&clip, 2.0, 0.5).unwrap();
        let starts: Vec<f64> = segs.iter().map(|s| s.span.0).collect();
        assert_eq!(starts, vec![0.0, 1.0, 2.0, 2.5]);
        assert!((segs.last().unwrap().span.1 - 4.5).abs() < 1e-9);
    }

    #[test]
    fn segment_count_formula_and_overlap_property() {
        // floor((L-W)/hop)+1 full windows, +1 when a tail remains.
        let sr = 16_000u32;
        for &(dur, window, overlap) in
            &[(6.0, 2.0, 0.5), (7.3, 2.0, 0.5), (5.0, 1.5, 0.5), (10.0, 3.0, 0.25)]
        {
            let clip = const_clip(dur, 0.3, sr);
            let segs = segment_audio(&clip, window, overlap).unwrap();
            let hop = window * (1.0 - overlap);
            let full = ((dur - window) / hop + 1e-9).floor() as usize + 1;
            let covered = (full - 1) as f64 * hop + window;
            let expect = if dur - covered > 1.0 / sr as f64 { full + 1 } else { full };
            assert_eq!(segs.len(), expect, "dur={dur} window={window} overlap={overlap}");
            // Consecutive full windows intersect by W*overlap, within a sample.
            for pair in segs.windows(2).take(full.saturating_sub(1)) {
                let inter = pair[0].span.1 - pair[1].span.0;
                assert!((inter - window * overlap).abs() < 1.0 / sr as f64 + 1e-9);
            }
        }
    }

    #[test]
    fn segment_rejects_bad_args() {
        let clip = const_clip(1.0, 0.0, 16_000);
        assert!(segment_audio(&clip, 0.0, 0.5).is_err());
        assert!(segment_audio(&clip, 2.0, 1.0).is_err());
        assert!(segment_audio(&clip, 2.0, -0.1).is_err());
        let empty = AudioClip::new(vec![], 16_000).unwrap();
        assert!(segment_audio(&empty, 2.0, 0.5).is_err());
    }

    #[test]
    fn resample_preserves_constant_signal() {
        let clip = const_clip(1.0, 0.7, 8_000);
        let up = clip.resample(16_000).unwrap();
        assert_eq!(up.sample_rate, 16_000);
        assert_eq!(up.samples.len(), 16_000);
        assert!(up.samples.iter().all(|&s| (s - 0.7).abs() < 1e-12));
    }

    #[test]
    fn resample_halves_sample_count() {
        let clip = AudioClip::new((0..1000).map(|i| (i as f64 * 0.01).sin()).collect(), 1000)
            .unwrap();
        let down = clip.resample(500).unwrap();
        assert_eq!(down.samples.len(), 500);
        // Downsampled values interpolate the original.
        assert!((down.samples[10] - clip.samples[20]).abs() < 1e-9);
    }

    #[test]
    fn peak_normalize_hits_unit_peak() {
        let clip = AudioClip::new(vec![0.1, -0.4, 0.2], 16_000).unwrap();
        let n = clip.peak_normalize();
        let peak = n.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        assert!((peak - 1.0).abs() < 1e-12);
        assert!((n.samples[0] - 0.25).abs() < 1e-12);
        // Silence stays silent.
        let z = AudioClip::new(vec![0.0; 5], 16_000).unwrap().peak_normalize();
        assert!(z.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn envelope_frame_count_is_ceil() {
        let clip = const_clip(1.0, 0.5, 16_000);
        assert_eq!(clip.envelope(25.0).len(), 25);
        let clip2 = AudioClip::new(vec![0.5; 16_100], 16_000).unwrap();
        // 1.00625 s -> ceil(25.15...) = 26 frames
        assert_eq!(clip2.envelope(25.0).len(), 26);
        assert!(clip.envelope(25.0).iter().all(|&e| (e - 0.5).abs() < 1e-12));
    }

    #[test]
    fn frame_counts_ignore_float_noise_on_exact_multiples() {
        // 0.56 * 25.0 = 14.000000000000002 in f64; still 14 frames.
        assert_eq!(frames_for_duration(8_960.0 / 16_000.0, 25.0), 14);
        assert_eq!(frames_for_duration(1.2, 25.0), 30);
        assert_eq!(frames_for_duration(0.0, 25.0), 0);
        // A real fractional frame still rounds up.
        assert_eq!(frames_for_duration(1.00625, 25.0), 26);
        let clip = AudioClip::new(vec![0.1; 8_960], 16_000).unwrap();
        assert_eq!(clip.envelope(25.0).len(), 14);
    }

    #[test]
    fn wav_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let clip =
            AudioClip::new((0..800).map(|i| (i as f64 * 0.02).sin() * 0.8).collect(), 16_000)
                .unwrap();
        write_wav(&clip, &path).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 16_000);
        assert_eq!(back.samples.len(), clip.samples.len());
        for (a, b) in clip.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() < 1e-6, "float32 roundtrip should be near-exact");
        }
    }

    #[test]
    fn clip_rejects_non_finite() {
        assert!(AudioClip::new(vec![0.0, f64::NAN], 16_000).is_err());
        assert!(AudioClip::new(vec![0.0], 0).is_err());
    }
}
