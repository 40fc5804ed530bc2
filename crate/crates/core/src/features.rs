//! Frame-aligned audio features: one row per 25 fps video frame.
//!
//! The real system would run a pretrained speech encoder here; the shipped
//! stand-in computes windowed log-mel-like band energies with a plain FFT,
//! which is deterministic, differentiably irrelevant (it only feeds
//! conditioning), and zero on silence.

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::audio::{frames_for_duration, AudioClip};
use crate::error::{Error, Result};

/// Canonical video frame rate the whole pipeline is standardized to.
pub const FPS: f64 = 25.0;

/// `[F x D_a]` features, row `t` summarizing audio around video frame `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatureSequence {
    pub features: Array2<f64>,
    pub fps: f64,
    pub source_duration_s: f64,
}

impl AudioFeatureSequence {
    pub fn new(features: Array2<f64>, fps: f64, source_duration_s: f64) -> Result<Self> {
        let expect = frames_for_duration(source_duration_s, fps);
        if features.nrows() != expect {
            return Err(Error::shape(format!(
                "feature frame count {} does not match ceil({source_duration_s} * {fps}) = {expect}",
                features.nrows()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("audio feature sequence".into()));
        }
        Ok(Self { features, fps, source_duration_s })
    }

    pub fn num_frames(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Mean over all frames, as a `[1 x D_a]` summary row.
    pub fn mean_pooled(&self) -> Array2<f64> {
        let mut out = Array2::zeros((1, self.dim()));
        for row in self.features.rows() {
            out.row_mut(0).zip_mut_with(&row, |o, &r| *o += r);
        }
        out.mapv_inplace(|v| v / self.num_frames() as f64);
        out
    }
}

/// Pluggable audio feature backend.
pub trait AudioFeatureExtractor {
    fn feature_dim(&self) -> usize;
    fn extract(&self, clip: &AudioClip) -> Result<AudioFeatureSequence>;
}

/// FFT-based stand-in: per frame, a centered window is transformed and pooled
/// into mel-spaced triangular bands, then compressed with `ln(1 + e)`.
pub struct MelFeatureExtractor {
    pub dim: usize,
    pub window: usize,
}

impl Default for MelFeatureExtractor {
    fn default() -> Self {
        Self { dim: 16, window: 1024 }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl AudioFeatureExtractor for MelFeatureExtractor {
    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, clip: &AudioClip) -> Result<AudioFeatureSequence> {
        if clip.is_empty() {
            return Err(Error::invalid("cannot extract features from an empty clip"));
        }
        let sr = clip.sample_rate as f64;
        let duration = clip.duration_s();
        let n_frames = frames_for_duration(duration, FPS);
        let nyquist = sr / 2.0;
        let n_bins = self.window / 2;

        // Mel-spaced band edges, dim+2 of them for dim triangles.
        let mel_max = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..self.dim + 2)
            .map(|i| mel_to_hz(mel_max * i as f64 / (self.dim + 1) as f64))
            .collect();
        let bin_hz = sr / self.window as f64;

        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(self.window);
        let mut out = Array2::zeros((n_frames, self.dim));
        let per_frame = sr / FPS;
        for t in 0..n_frames {
            let center = ((t as f64 + 0.5) * per_frame).round() as isize;
            let mut buf: Vec<Complex<f64>> = (0..self.window as isize)
                .map(|i| {
                    let idx = center - (self.window / 2) as isize + i;
                    let s = if idx >= 0 && (idx as usize) < clip.samples.len() {
                        clip.samples[idx as usize]
                    } else {
                        0.0
                    };
                    // Hann window keeps band energies smooth across frames.
                    let w = 0.5
                        - 0.5
                            * (2.0 * std::f64::consts::PI * i as f64
                                / (self.window - 1) as f64)
                                .cos();
                    Complex::new(s * w, 0.0)
                })
                .collect();
            fft.process(&mut buf);
            for b in 0..self.dim {
                let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
                let mut energy = 0.0;
                for k in 1..n_bins {
                    let f = k as f64 * bin_hz;
                    let w = if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo).max(1e-12)
                    } else {
                        (hi - f) / (hi - mid).max(1e-12)
                    };
                    if w > 0.0 {
                        energy += w * buf[k].norm_sqr();
                    }
                }
                out[(t, b)] = (1.0 + energy).ln();
            }
        }
        AudioFeatureSequence::new(out, FPS, duration)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip_samples(samples: Vec<f64>) -> AudioClip {
        AudioClip::new(samples, 16_000).unwrap()
    }

    #[test]
    fn one_second_gives_25_rows() {
        let clip = clip_samples(vec![0.1; 16_000]);
        let ex = MelFeatureExtractor::default();
        let seq = ex.extract(&clip).unwrap();
        assert_eq!(seq.num_frames(), 25);
        assert_eq!(seq.dim(), 16);
    }

    #[test]
    fn ceil_rule_adds_a_frame() {
        // 1.02 s -> ceil(25.5) = 26 rows.
        let clip = clip_samples(vec![0.1; 16_320]);
        let seq = MelFeatureExtractor::default().extract(&clip).unwrap();
        assert_eq!(seq.num_frames(), 26);
    }

    #[test]
    fn silence_gives_zero_rows() {
        let clip = clip_samples(vec![0.0; 16_000]);
        let seq = MelFeatureExtractor::default().extract(&clip).unwrap();
        assert!(seq.features.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tone_concentrates_energy_in_matching_band() {
        // A 400 Hz tone should put most energy into the band containing
        // 400 Hz, and tone frames must differ from silent frames.
        let sr = 16_000.0;
        let samples: Vec<f64> =
            (0..32_000).map(|i| (2.0 * std::f64::consts::PI * 400.0 * i as f64 / sr).sin()).collect();
        let clip = clip_samples(samples);
        let seq = MelFeatureExtractor::default().extract(&clip).unwrap();
        let row = seq.features.row(10);
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        // 400 Hz sits in one of the lower mel bands.
        assert!(argmax <= 4, "tone energy landed in band {argmax}");
        assert!(row.iter().sum::<f64>() > 1.0);
    }

    #[test]
    fn extraction_is_deterministic() {
        let samples: Vec<f64> = (0..20_000).map(|i| ((i * 7 % 100) as f64 - 50.0) / 60.0).collect();
        let clip = clip_samples(samples);
        let ex = MelFeatureExtractor::default();
        assert_eq!(ex.extract(&clip).unwrap().features, ex.extract(&clip).unwrap().features);
    }

    #[test]
    fn empty_clip_rejected() {
        let clip = AudioClip::new(vec![], 16_000).unwrap();
        assert!(MelFeatureExtractor::default().extract(&clip).is_err());
    }

    #[test]
    fn sequence_validates_frame_count() {
        let bad = Array2::zeros((10, 16));
        assert!(AudioFeatureSequence::new(bad, FPS, 1.0).is_err());
        let good = Array2::zeros((25, 16));
        assert!(AudioFeatureSequence::new(good, FPS, 1.0).is_ok());
    }

    #[test]
    fn mean_pooled_matches_manual_average() {
        let mut f = Array2::zeros((2, 3));
        f[(0, 0)] = 1.0;
        f[(1, 0)] = 3.0;
        f[(0, 2)] = 2.0;
        let seq = AudioFeatureSequence { features: f, fps: FPS, source_duration_s: 0.08 };
        let m = seq.mean_pooled();
        assert_eq!(m[(0, 0)], 2.0);
        assert_eq!(m[(0, 1)], 0.0);
        assert_eq!(m[(0, 2)], 1.0);
    }
}
