//! Multi-modal emotion embedding: transcript sentiment, speech-emotion
//! distribution, and a segmented valence-arousal track, concatenated into one
//! fixed-dimension vector per clip.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::{segment_audio, AudioClip};
use crate::error::{Error, Result};

/// Dimensions and segmentation parameters for the embedding. Constant across
/// a run; hashed into artifacts via the pipeline config.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EmotionConfig {
    /// Sentiment vector dimension (class scores of the transcript model).
    pub d_t: usize,
    /// Speech-emotion class-distribution dimension.
    pub d_ser: usize,
    /// Number of valence-arousal samples after resampling.
    pub k_fixed: usize,
    /// Segmentation window in seconds.
    pub window_s: f64,
    /// Segment overlap fraction.
    pub overlap: f64,
}

impl Default for EmotionConfig {
    fn default() -> Self {
        Self { d_t: 7, d_ser: 8, k_fixed: 6, window_s: 2.0, overlap: 0.5 }
    }
}

impl EmotionConfig {
    /// Total embedding dimension `D_t + D_ser + 2*K_fixed`.
    pub fn full_dim(&self) -> usize {
        self.d_t + self.d_ser + 2 * self.k_fixed
    }
}

/// Per-segment (valence, arousal) pairs with their source spans in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct VASequence {
    pairs: Vec<(f64, f64)>,
    spans: Vec<(f64, f64)>,
}

impl VASequence {
    pub fn new(pairs: Vec<(f64, f64)>, spans: Vec<(f64, f64)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("VA sequence must contain at least one pair"));
        }
        if pairs.len() != spans.len() {
            return Err(Error::shape(format!(
                "VA sequence has {} pairs but {} spans",
                pairs.len(),
                spans.len()
            )));
        }
        for (i, &(v, a)) in pairs.iter().enumerate() {
            if !(-1.0..=1.0).contains(&v) || !(-1.0..=1.0).contains(&a) {
                return Err(Error::invalid(format!(
                    "VA pair {i} = ({v}, {a}) outside [-1, 1]"
                )));
            }
        }
        if spans.windows(2).any(|w| w[1].0 < w[0].0) {
            return Err(Error::invalid("VA spans must be ordered by start time"));
        }
        Ok(Self { pairs, spans })
    }

    pub fn pairs(&self) -> &[(f64, f64)] {
        &self.pairs
    }

    pub fn spans(&self) -> &[(f64, f64)] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        false // guaranteed non-empty by construction
    }
}

/// The concatenated embedding and its three parts.
#[derive(Debug, Clone, PartialEq)]
pub struct EmotionEmbedding {
    pub e_text: Vec<f64>,
    pub e_ser: Vec<f64>,
    pub e_va: Vec<f64>,
    pub e_full: Vec<f64>,
}

/// Pluggable extractor backends. Implementations must be deterministic per
/// clip; `ser` must return a probability distribution.
pub trait EmotionExtractorSuite {
    /// Optional pre-filter applied before any extraction (e.g. background
    /// music removal). Identity by default.
    fn pre_filter(&self, clip: &AudioClip) -> Result<AudioClip> {
        Ok(clip.clone())
    }
    /// Transcription + sentiment, as a fixed-dimension score vector.
    fn text(&self, clip: &AudioClip) -> Result<Vec<f64>>;
    /// Speech-emotion class distribution.
    fn ser(&self, clip: &AudioClip) -> Result<Vec<f64>>;
    /// Valence and arousal for one segment, each in `[-1, 1]`.
    fn va(&self, clip: &AudioClip) -> Result<(f64, f64)>;
}

/// Run the VA extractor over every overlapping segment of the clip.
pub fn extract_va_sequence(
    clip: &AudioClip,
    suite: &dyn EmotionExtractorSuite,
    window_s: f64,
    overlap: f64,
) -> Result<VASequence> {
    let filtered = suite.pre_filter(clip)?;
    let segments = segment_audio(&filtered, window_s, overlap)?;
    let mut pairs = Vec::with_capacity(segments.len());
    let mut spans = Vec::with_capacity(segments.len());
    for (i, seg) in segments.iter().enumerate() {
        let (v, a) = suite.va(&seg.clip).map_err(|e| Error::Extractor {
            name: "va".into(),
            reason: format!("segment {i} ({:.3}..{:.3}s): {e}", seg.span.0, seg.span.1),
        })?;
        pairs.push((v, a));
        spans.push(seg.span);
    }
    VASequence::new(pairs, spans)
}

/// Resample the (v, a) track to exactly `k_fixed` samples and flatten it
/// interleaved: `[v_1, a_1, v_2, a_2, ...]`.
///
/// When the count already matches this is a plain flatten; otherwise both
/// tracks are linearly interpolated over normalized time.
pub fn resample_va_to_fixed(seq: &VASequence, k_fixed: usize) -> Result<Vec<f64>> {
    if k_fixed < 1 {
        return Err(Error::invalid("k_fixed must be at least 1"));
    }
    let k = seq.len();
    let mut out = Vec::with_capacity(2 * k_fixed);
    if k == k_fixed {
        for &(v, a) in seq.pairs() {
            out.push(v);
            out.push(a);
        }
        return Ok(out);
    }
    for j in 0..k_fixed {
        // Normalized target position; a single output sample reads the middle.
        let u = if k_fixed > 1 { j as f64 / (k_fixed - 1) as f64 } else { 0.5 };
        let (v, a) = interp_pair(seq.pairs(), u);
        out.push(v);
        out.push(a);
    }
    Ok(out)
}

fn interp_pair(pairs: &[(f64, f64)], u: f64) -> (f64, f64) {
    let k = pairs.len();
    if k == 1 {
        return pairs[0];
    }
    let pos = u * (k - 1) as f64;
    let lo = (pos.floor() as usize).min(k - 2);
    let frac = pos - lo as f64;
    let (v0, a0) = pairs[lo];
    let (v1, a1) = pairs[lo + 1];
    (v0 + frac * (v1 - v0), a0 + frac * (a1 - a0))
}

/// Build the full embedding `[e_text || e_ser || e_va]` for one clip.
pub fn build_emotion_embedding(
    clip: &AudioClip,
    suite: &dyn EmotionExtractorSuite,
    config: &EmotionConfig,
) -> Result<EmotionEmbedding> {
    let filtered = suite.pre_filter(clip)?;
    let e_text = suite.text(&filtered)?;
    if e_text.len() != config.d_t {
        return Err(Error::Extractor {
            name: "text".into(),
            reason: format!("returned dim {} but config fixes D_t={}", e_text.len(), config.d_t),
        });
    }
    let e_ser = suite.ser(&filtered)?;
    if e_ser.len() != config.d_ser {
        return Err(Error::Extractor {
            name: "ser".into(),
            reason: format!("returned dim {} but config fixes D_ser={}", e_ser.len(), config.d_ser),
        });
    }
    let sum: f64 = e_ser.iter().sum();
    if e_ser.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Extractor {
            name: "ser".into(),
            reason: format!("output is not a probability distribution (sum {sum})"),
        });
    }
    let seq = extract_va_sequence(clip, suite, config.window_s, config.overlap)?;
    let e_va = resample_va_to_fixed(&seq, config.k_fixed)?;
    let mut e_full = Vec::with_capacity(config.full_dim());
    e_full.extend_from_slice(&e_text);
    e_full.extend_from_slice(&e_ser);
    e_full.extend_from_slice(&e_va);
    if e_full.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("emotion embedding contains non-finite entries".into()));
    }
    Ok(EmotionEmbedding { e_text, e_ser, e_va, e_full })
}

/// Sidecar metadata written next to an exported embedding.
#[derive(Debug, Serialize, Deserialize)]
pub struct EmbeddingSidecar {
    pub dims: EmbeddingDims,
    pub source_clip: String,
    pub config_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbeddingDims {
    pub text: usize,
    pub ser: usize,
    pub va: usize,
    pub full: usize,
}

/// Export `e_full` as little-endian float32 at `path`, with a `.json` sidecar
/// describing dimensions and provenance.
pub fn export_embedding(
    emb: &EmotionEmbedding,
    path: &Path,
    source_clip: &str,
    config_hash: &str,
) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for &x in &emb.e_full {
        f.write_all(&(x as f32).to_le_bytes())?;
    }
    let sidecar = EmbeddingSidecar {
        dims: EmbeddingDims {
            text: emb.e_text.len(),
            ser: emb.e_ser.len(),
            va: emb.e_va.len(),
            full: emb.e_full.len(),
        },
        source_clip: source_clip.to_string(),
        config_hash: config_hash.to_string(),
    };
    let sidecar_path = path.with_extension("json");
    std::fs::write(&sidecar_path, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

/// Deterministic stand-in extractor suite driven by clip statistics.
///
/// Sentiment and SER are softmaxes of fixed linear functionals over the
/// statistics vector; VA is (clipped mean amplitude, clipped RMS). Weights are
/// drawn once from a fixed seed so the suite behaves like a frozen model.
pub struct SyntheticExtractorSuite {
    text_w: Vec<Vec<f64>>,
    ser_w: Vec<Vec<f64>>,
    d_t: usize,
    d_ser: usize,
}

const STAT_DIM: usize = 6;

impl SyntheticExtractorSuite {
    pub fn new(d_t: usize, d_ser: usize) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5EED_FACE);
        let mut draw = |rows: usize| -> Vec<Vec<f64>> {
            (0..rows)
                .map(|_| (0..STAT_DIM + 1).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect()
        };
        Self { text_w: draw(d_t), ser_w: draw(d_ser), d_t, d_ser }
    }

    pub fn with_default_dims() -> Self {
        let c = EmotionConfig::default();
        Self::new(c.d_t, c.d_ser)
    }

    /// Summary statistics of a clip: mean, RMS, peak, zero-crossing rate,
    /// mean absolute first difference, and duration (seconds / 20).
    fn stats(clip: &AudioClip) -> [f64; STAT_DIM] {
        let n = clip.samples.len().max(1) as f64;
        let mean = clip.samples.iter().sum::<f64>() / n;
        let rms = (clip.samples.iter().map(|s| s * s).sum::<f64>() / n).sqrt();
        let peak = clip.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        let zcr = clip
            .samples
            .windows(2)
            .filter(|w| (w[0] >= 0.0) != (w[1] >= 0.0))
            .count() as f64
            / n;
        let diff = clip.samples.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() / n;
        [mean, rms, peak, zcr, diff, clip.duration_s() / 20.0]
    }

    fn softmax_scores(w: &[Vec<f64>], stats: &[f64; STAT_DIM]) -> Vec<f64> {
        let logits: Vec<f64> = w
            .iter()
            .map(|row| {
                row[..STAT_DIM].iter().zip(stats).map(|(wi, si)| wi * si).sum::<f64>()
                    + row[STAT_DIM]
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.iter().map(|e| e / sum).collect()
    }

    /// The VA rule, exposed so training code can replicate it on the
    /// autodiff tape: `v = clamp(mean, -1, 1)`, `a = clamp(rms, -1, 1)`.
    pub fn va_of_samples(samples: &[f64]) -> (f64, f64) {
        let n = samples.len().max(1) as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let rms = (samples.iter().map(|s| s * s).sum::<f64>() / n).sqrt();
        (mean.clamp(-1.0, 1.0), rms.clamp(-1.0, 1.0))
    }
}

impl EmotionExtractorSuite for SyntheticExtractorSuite {
    fn text(&self, clip: &AudioClip) -> Result<Vec<f64>> {
        let out = Self::softmax_scores(&self.text_w, &Self::stats(clip));
        debug_assert_eq!(out.len(), self.d_t);
        Ok(out)
    }

    fn ser(&self, clip: &AudioClip) -> Result<Vec<f64>> {
        let out = Self::softmax_scores(&self.ser_w, &Self::stats(clip));
        debug_assert_eq!(out.len(), self.d_ser);
        Ok(out)
    }

    fn va(&self, clip: &AudioClip) -> Result<(f64, f64)> {
        Ok(Self::va_of_samples(&clip.samples))
    }
}
