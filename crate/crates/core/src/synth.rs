//! Synthetic dataset generator: parametric face clips with ground truth.
//!
//! Each clip is a soft-rendered face whose mouth opening tracks the audio
//! envelope frame by frame (the open mouth is bright, so mean mouth-region
//! intensity rises with the envelope), whose background hue encodes the
//! emotion knobs, and whose caption describes those knobs in words. Audio is
//! an amplitude-modulated tone with a DC offset, giving the valence/arousal
//! extractor something real to measure. Everything is a closed-form function
//! of the seed, so regeneration is bitwise reproducible.

use ndarray::Array2;

use crate::audio::{frames_for_duration, AudioClip, CANONICAL_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::features::FPS;
use crate::rng::{derive_rng, stream};
use crate::video::VideoTensor;
use rand::Rng;

/// One generated clip with its ground-truth generation knobs.
#[derive(Debug, Clone)]
pub struct SynthClip {
    pub id: String,
    pub video: VideoTensor,
    pub audio: AudioClip,
    pub caption: String,
    /// Valence knob in [-0.6, 0.6], realized as the audio DC offset.
    pub valence: f64,
    /// Arousal knob in [0.3, 0.8], realized as envelope depth.
    pub arousal: f64,
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    color: [f64; 3],
}

impl Ellipse {
    /// Soft coverage in [0, 1] with a roughly one-pixel edge.
    fn alpha(&self, y: f64, x: f64) -> f64 {
        let d = (((y - self.cy) / self.ry).powi(2) + ((x - self.cx) / self.rx).powi(2)).sqrt();
        // Convert the normalized distance to an approximate pixel distance
        // using the smaller radius, then feather over one pixel.
        let edge = (1.0 - d) * self.ry.min(self.rx);
        (edge + 0.5).clamp(0.0, 1.0)
    }
}

fn composite(base: [f64; 3], e: &Ellipse, y: f64, x: f64) -> [f64; 3] {
    let a = e.alpha(y, x);
    [
        base[0] * (1.0 - a) + e.color[0] * a,
        base[1] * (1.0 - a) + e.color[1] * a,
        base[2] * (1.0 - a) + e.color[2] * a,
    ]
}

fn mood_word(v: f64) -> &'static str {
    if v < -0.35 {
        "gloomy"
    } else if v < -0.1 {
        "somber"
    } else if v <= 0.1 {
        "neutral"
    } else if v <= 0.35 {
        "bright"
    } else {
        "joyful"
    }
}

fn pace_word(a: f64) -> &'static str {
    if a < 0.45 {
        "slowly"
    } else if a < 0.65 {
        "steadily"
    } else {
        "quickly"
    }
}

/// Generate clip `index` of a seeded family. `duration_s` should be a
/// multiple of 1/25 s so frame and sample counts line up exactly.
pub fn generate_clip(
    seed: u64,
    index: u64,
    duration_s: f64,
    h: usize,
    w: usize,
) -> Result<SynthClip> {
    if !(0.2..=30.0).contains(&duration_s) {
        return Err(Error::invalid(format!("clip duration {duration_s} out of range")));
    }
    if h < 16 || w < 16 {
        return Err(Error::invalid("synthetic frames need at least 16x16 pixels"));
    }
    let mut rng = derive_rng(seed, &[stream::SYNTH_DATA, index]);
    let valence: f64 = rng.gen_range(-0.6..0.6);
    let arousal: f64 = rng.gen_range(0.3..0.8);
    let mod_hz: f64 = rng.gen_range(0.8..2.2);
    let mod_phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let carrier_hz: f64 = rng.gen_range(180.0..320.0);
    let sway_phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);

    // Envelope in [0, 1]: raised sinusoid at the modulation rate.
    let env = move |t: f64| {
        0.5 + 0.5 * (std::f64::consts::TAU * mod_hz * t + mod_phase).sin()
    };

    // Audio: an amplitude-modulated carrier with half-wave asymmetry. The
    // asymmetry term `beta * |sin|` shifts the sample mean (valence) without
    // touching the mean absolute amplitude, so the per-frame envelope stays
    // proportional to the modulation the mouth tracks.
    let sr = CANONICAL_SAMPLE_RATE;
    let n_samples = (duration_s * sr as f64).round() as usize;
    let beta = valence;
    let depth = 0.7 * arousal;
    let mut samples = Vec::with_capacity(n_samples);
    for n in 0..n_samples {
        let t = n as f64 / sr as f64;
        let osc = (std::f64::consts::TAU * carrier_hz * t).sin();
        let s = depth * (0.2 + 0.8 * env(t)) * (osc + beta * osc.abs());
        samples.push(s.clamp(-1.0, 1.0));
    }
    let audio = AudioClip::new(samples, sr)?;

    // Frames: face, eyes, lip ring, and a bright inner mouth whose height
    // tracks the envelope sampled at the frame midpoint.
    let n_frames = frames_for_duration(duration_s, FPS);
    let (hf, wf) = (h as f64, w as f64);
    let mut data = Array2::zeros((n_frames, 3 * h * w));
    for f in 0..n_frames {
        let t = (f as f64 + 0.5) / FPS;
        let aperture = env(t);
        let sway = 0.015 * wf * (std::f64::consts::TAU * 0.4 * t + sway_phase).sin();
        let bg = [
            (0.38 + 0.22 * valence).clamp(0.0, 1.0),
            (0.36 + 0.12 * arousal).clamp(0.0, 1.0),
            (0.38 - 0.22 * valence).clamp(0.0, 1.0),
        ];
        let face = Ellipse {
            cy: 0.47 * hf,
            cx: 0.5 * wf + sway,
            ry: 0.36 * hf,
            rx: 0.30 * wf,
            color: [0.84, 0.66, 0.52],
        };
        let eye_l = Ellipse {
            cy: 0.34 * hf,
            cx: 0.36 * wf + sway,
            ry: 0.045 * hf,
            rx: 0.045 * wf,
            color: [0.10, 0.10, 0.13],
        };
        let eye_r = Ellipse {
            cy: 0.34 * hf,
            cx: 0.64 * wf + sway,
            ry: 0.045 * hf,
            rx: 0.045 * wf,
            color: [0.10, 0.10, 0.13],
        };
        let lips = Ellipse {
            cy: 0.75 * hf,
            cx: 0.5 * wf + sway,
            ry: 0.115 * hf,
            rx: 0.145 * wf,
            color: [0.48, 0.22, 0.22],
        };
        let mouth = Ellipse {
            cy: 0.75 * hf,
            cx: 0.5 * wf + sway,
            ry: (0.02 + 0.075 * aperture) * hf,
            rx: 0.11 * wf,
            color: [0.95, 0.92, 0.88],
        };
        for y in 0..h {
            for x in 0..w {
                let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
                let mut px = bg;
                for e in [&face, &eye_l, &eye_r, &lips, &mouth] {
                    px = composite(px, e, yf, xf);
                }
                for (ch, &v) in px.iter().enumerate() {
                    data[(f, ch * h * w + y * w + x)] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    let video = VideoTensor::new(data, 3, h, w)?;

    let caption = format!(
        "a {} synthetic face speaking {}",
        mood_word(valence),
        pace_word(arousal)
    );
    Ok(SynthClip {
        id: format!("synth-{seed:08x}-{index:03}"),
        video,
        audio,
        caption,
        valence,
        arousal,
    })
}
