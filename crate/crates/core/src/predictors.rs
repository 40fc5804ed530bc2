//! Synthetic stand-ins for the pretrained predictors the auxiliary losses and
//! metrics depend on: sync estimation, action-unit detection, and caption
//! embedding.
//!
//! Each predictor is a small fixed linear probe implemented as autodiff tape
//! operations, so the training losses can backpropagate through them; the
//! plain-value facade just runs the tape with constants and extracts values.

use ndarray::Array2;
use rand::Rng;

use crate::audio::AudioClip;
use crate::autodiff::{Tape, Var};
use crate::emotion::{extract_va_sequence, EmotionConfig, SyntheticExtractorSuite, VASequence};
use crate::error::{Error, Result};
use crate::features::FPS;
use crate::losses::{AUMatrix, CaptionEmbedding, SyncEstimate};
use crate::video::VideoTensor;

/// Fixed action-unit identifiers reported by the synthetic detector.
pub const AU_IDS: [&str; 6] = ["AU01", "AU02", "AU04", "AU06", "AU12", "AU25"];

/// Caption embedding dimension (first component is a constant 1, keeping the
/// norm strictly positive for every input).
pub const CAPTION_DIM: usize = 16;

/// Cross-correlation search half-width in frames for sync estimation.
pub const SYNC_MAX_LAG: usize = 3;

const GRID: usize = 4;
const SOFTMAX_TEMP: f64 = 8.0;
const CENTROID_EPS: f64 = 1e-6;

/// Pluggable predictor backends for losses and metrics.
pub trait PredictorSuite {
    fn sync_estimate(&self, video: &VideoTensor, audio: &AudioClip) -> Result<SyncEstimate>;
    fn va_predict(&self, audio: &AudioClip) -> Result<VASequence>;
    fn au_detect(&self, video: &VideoTensor) -> Result<AUMatrix>;
    fn caption_embed(&self, video: &VideoTensor) -> Result<CaptionEmbedding>;
    /// Normalized peak cross-correlation between mouth motion and audio
    /// envelope, scaled to [0, 10].
    fn sync_confidence(&self, video: &VideoTensor, audio: &AudioClip) -> Result<f64>;
}

/// Deterministic probe-based predictors over `[0,1]` pixel video.
pub struct SyntheticPredictors {
    c: usize,
    h: usize,
    w: usize,
    /// `[C*H*W x C*GRID*GRID]` cell-mean pooling.
    pool: Array2<f64>,
    /// `[C*GRID*GRID x N_AU]` probe weights and `[1 x N_AU]` bias.
    au_w: Array2<f64>,
    au_b: Array2<f64>,
    /// `[C*GRID*GRID x (CAPTION_DIM-1)]` caption probe.
    cap_w: Array2<f64>,
    /// `[C*GRID*GRID x 2]` video-side valence/arousal probe.
    va_w: Array2<f64>,
    /// `[C*H*W x 1]` normalized mouth-region mask.
    mouth: Array2<f64>,
    emotion_config: EmotionConfig,
    emotion_suite: SyntheticExtractorSuite,
}

impl SyntheticPredictors {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        assert!(h % GRID == 0 && w % GRID == 0, "frame size must divide the pooling grid");
        let (ch, cw) = (h / GRID, w / GRID);
        let mut pool = Array2::zeros((c * h * w, c * GRID * GRID));
        for cc in 0..c {
            for gy in 0..GRID {
                for gx in 0..GRID {
                    let col = cc * GRID * GRID + gy * GRID + gx;
                    for y in gy * ch..(gy + 1) * ch {
                        for x in gx * cw..(gx + 1) * cw {
                            pool[(cc * h * w + y * w + x, col)] = 1.0 / (ch * cw) as f64;
                        }
                    }
                }
            }
        }

        let mut rng = crate::rng::derive_rng(0xFACE_CAFE, &[c as u64, h as u64, w as u64]);
        let au_w = Array2::from_shape_fn((c * GRID * GRID, AU_IDS.len()), |_| {
            rng.gen_range(-1.5..1.5)
        });
        let au_b = Array2::from_shape_fn((1, AU_IDS.len()), |_| rng.gen_range(-0.5..0.5));
        let cap_w = Array2::from_shape_fn((c * GRID * GRID, CAPTION_DIM - 1), |_| {
            rng.gen_range(-1.0..1.0)
        });
        // Drawn after the probes above so their values stay stable.
        let va_w =
            Array2::from_shape_fn((c * GRID * GRID, 2), |_| rng.gen_range(-1.0..1.0));

        // Mouth region: lower-middle of the frame, all channels averaged.
        let (y0, y1) = ((h * 5) / 8, (h * 7) / 8);
        let (x0, x1) = ((w * 5) / 16, (w * 11) / 16);
        let count = (c * (y1 - y0) * (x1 - x0)) as f64;
        let mut mouth = Array2::zeros((c * h * w, 1));
        for cc in 0..c {
            for y in y0..y1 {
                for x in x0..x1 {
                    mouth[(cc * h * w + y * w + x, 0)] = 1.0 / count;
                }
            }
        }

        Self {
            c,
            h,
            w,
            pool,
            au_w,
            au_b,
            cap_w,
            va_w,
            mouth,
            emotion_config: EmotionConfig::default(),
            emotion_suite: SyntheticExtractorSuite::with_default_dims(),
        }
    }

    fn check_video(&self, video: &VideoTensor) -> Result<()> {
        if (video.c, video.h, video.w) != (self.c, self.h, self.w) {
            return Err(Error::shape(format!(
                "video is {}x{}x{}, predictors built for {}x{}x{}",
                video.c, video.h, video.w, self.c, self.h, self.w
            )));
        }
        Ok(())
    }

    /// Grid-pooled features `[F x C*GRID*GRID]` on the tape.
    pub fn pooled_t(&self, tape: &Tape, frames: Var) -> Var {
        let p = tape.constant(self.pool.clone());
        tape.matmul(frames, p)
    }

    /// Per-frame AU occurrence probabilities `[F x N_AU]` on the tape.
    pub fn au_rows_t(&self, tape: &Tape, frames: Var) -> Var {
        let pooled = self.pooled_t(tape, frames);
        let w = tape.constant(self.au_w.clone());
        let b = tape.constant(self.au_b.clone());
        let logits = tape.matmul(pooled, w);
        let logits = tape.add_bias(logits, b);
        tape.sigmoid(logits)
    }

    /// Per-frame (valence, arousal) read off the video, `[F x 2]` on the
    /// tape, tanh-squashed into [-1, 1]. This is the video-side counterpart
    /// of the audio VA extractor: emotion-consistency training and the CCC
    /// metrics need a signal that actually depends on the frames.
    pub fn va_rows_t(&self, tape: &Tape, frames: Var) -> Var {
        let pooled = self.pooled_t(tape, frames);
        let w = tape.constant(self.va_w.clone());
        let probes = tape.matmul(pooled, w);
        tape.tanh(probes)
    }

    /// Plain per-frame VA track `[F x 2]` from video frames.
    pub fn va_track(&self, video: &VideoTensor) -> Result<Array2<f64>> {
        self.check_video(video)?;
        let tape = Tape::new();
        let frames = tape.constant(video.data.clone());
        let rows = self.va_rows_t(&tape, frames);
        Ok(tape.value(rows))
    }

    /// Caption embedding `[1 x CAPTION_DIM]` on the tape: constant leading 1,
    /// then tanh-squashed probes of the time-averaged pooled features.
    pub fn caption_embed_t(&self, tape: &Tape, frames: Var) -> Var {
        let (f, _) = tape.shape(frames);
        let pooled = self.pooled_t(tape, frames);
        let mean = tape.col_sum(pooled);
        let mean = tape.scale(mean, 1.0 / f as f64);
        let w = tape.constant(self.cap_w.clone());
        let probes = tape.matmul(mean, w);
        let probes = tape.tanh(probes);
        let one = tape.constant(Array2::from_elem((1, 1), 1.0));
        tape.concat_cols(&[one, probes])
    }

    /// Mean mouth-region intensity per frame, `[F x 1]` on the tape.
    pub fn mouth_track_t(&self, tape: &Tape, frames: Var) -> Var {
        let m = tape.constant(self.mouth.clone());
        tape.matmul(frames, m)
    }

    /// Differentiable sync estimate from the mouth track against a fixed
    /// audio envelope: soft-argmax of lagged cross-correlation gives the
    /// offset magnitude, and the regularized centroid of the squared track
    /// difference gives the misalignment timestamp.
    pub fn sync_estimate_t(&self, tape: &Tape, mouth: Var, envelope: &[f64]) -> (Var, Var) {
        let (f, _) = tape.shape(mouth);
        assert_eq!(f, envelope.len(), "mouth track and envelope must align");
        let env =
            tape.constant(Array2::from_shape_fn((1, f), |(_, j)| envelope[j]));
        let m_row = tape.transpose(mouth);
        let zm = zscore_row(tape, m_row);
        let ze = zscore_row(tape, env);

        let max_lag = SYNC_MAX_LAG.min(f.saturating_sub(1));
        let lags: Vec<i64> = (-(max_lag as i64)..=max_lag as i64).collect();
        let mut corrs = Vec::with_capacity(lags.len());
        for &l in &lags {
            // corr(l) = mean_f zm[f] * ze[f - l] over the valid overlap.
            let (a, b) = if l >= 0 { (l as usize, f) } else { (0, f - l.unsigned_abs() as usize) };
            let zm_s = tape.slice_cols(zm, a, b);
            let ze_s = tape.slice_cols(ze, (a as i64 - l) as usize, (b as i64 - l) as usize);
            let prod = tape.mul(zm_s, ze_s);
            let s = tape.sum_all(prod);
            corrs.push(tape.scale(s, 1.0 / f as f64));
        }
        let corr_row = tape.concat_cols(&corrs);
        let sharpened = tape.scale(corr_row, SOFTMAX_TEMP);
        let probs = tape.softmax_rows(sharpened);
        let abs_lag_col = tape.constant(Array2::from_shape_fn((lags.len(), 1), |(i, _)| {
            lags[i].unsigned_abs() as f64 / FPS
        }));
        let dt = tape.matmul(probs, abs_lag_col);

        // Timestamp: energy-weighted centroid of frame times, pulled to the
        // clip midpoint when the tracks agree everywhere.
        let diff = tape.sub(zm, ze);
        let wgt = tape.square(diff);
        let times = tape.constant(Array2::from_shape_fn((f, 1), |(i, _)| {
            (i as f64 + 0.5) / FPS
        }));
        let num = tape.matmul(wgt, times);
        let t_mid = f as f64 / (2.0 * FPS);
        let num = tape.add_scalar(num, CENTROID_EPS * t_mid);
        let den = tape.sum_all(wgt);
        let den = tape.add_scalar(den, CENTROID_EPS);
        let t = tape.div_scalar_var(num, den);
        (dt, t)
    }

    /// Normalized correlation between mouth track and audio envelope at each
    /// lag in `[-SYNC_MAX_LAG, SYNC_MAX_LAG]`, as `(lag, score)` pairs.
    pub fn lagged_scores(
        &self,
        video: &VideoTensor,
        audio: &AudioClip,
    ) -> Result<Vec<(i64, f64)>> {
        self.check_video(video)?;
        let envelope = audio.envelope(FPS);
        let f = video.num_frames();
        if envelope.len() != f {
            return Err(Error::shape(format!(
                "audio envelope has {} frames, video has {f}",
                envelope.len()
            )));
        }
        let tape = Tape::new();
        let frames = tape.constant(video.data.clone());
        let mouth = self.mouth_track_t(&tape, frames);
        let m: Vec<f64> = tape.value(mouth).iter().copied().collect();
        let zm = zscore_vec(&m);
        let ze = zscore_vec(&envelope);
        let max_lag = SYNC_MAX_LAG.min(f.saturating_sub(1)) as i64;
        let mut scores = Vec::with_capacity(2 * max_lag as usize + 1);
        for l in -max_lag..=max_lag {
            let (a, b) = if l >= 0 { (l as usize, f) } else { (0, f - l.unsigned_abs() as usize) };
            let mut s = 0.0;
            for i in a..b {
                s += zm[i] * ze[(i as i64 - l) as usize];
            }
            scores.push((l, s / f as f64));
        }
        Ok(scores)
    }

    /// Peak lagged Pearson correlation between mouth track and envelope,
    /// clamped to [0, 1] and scaled by 10.
    fn confidence(&self, video: &VideoTensor, audio: &AudioClip) -> Result<f64> {
        let peak = self
            .lagged_scores(video, audio)?
            .into_iter()
            .map(|(_, s)| s)
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(peak.clamp(0.0, 1.0) * 10.0)
    }
}

/// Subtract the mean and divide by std (+ tiny epsilon) along a `[1 x F]` row.
fn zscore_row(tape: &Tape, row: Var) -> Var {
    let centered = tape.sub_row_mean(row);
    let sq = tape.square(centered);
    let var = tape.mean_all(sq);
    let var = tape.add_scalar(var, 1e-12);
    let sd = tape.sqrt(var);
    tape.div_scalar_var(centered, sd)
}

fn zscore_vec(v: &[f64]) -> Vec<f64> {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = (var + 1e-12).sqrt();
    v.iter().map(|x| (x - mean) / sd).collect()
}

impl PredictorSuite for SyntheticPredictors {
    fn sync_estimate(&self, video: &VideoTensor, audio: &AudioClip) -> Result<SyncEstimate> {
        self.check_video(video)?;
        let envelope = audio.envelope(FPS);
        if envelope.len() != video.num_frames() {
            return Err(Error::shape(format!(
                "audio envelope has {} frames, video has {}",
                envelope.len(),
                video.num_frames()
            )));
        }
        let tape = Tape::new();
        let frames = tape.constant(video.data.clone());
        let mouth = self.mouth_track_t(&tape, frames);
        let (dt, t) = self.sync_estimate_t(&tape, mouth, &envelope);
        SyncEstimate::new(tape.scalar_value(dt), tape.scalar_value(t))
    }

    fn va_predict(&self, audio: &AudioClip) -> Result<VASequence> {
        extract_va_sequence(
            audio,
            &self.emotion_suite,
            self.emotion_config.window_s,
            self.emotion_config.overlap,
        )
    }

    fn au_detect(&self, video: &VideoTensor) -> Result<AUMatrix> {
        self.check_video(video)?;
        let tape = Tape::new();
        let frames = tape.constant(video.data.clone());
        let rows = self.au_rows_t(&tape, frames);
        AUMatrix::new(tape.value(rows), AU_IDS.iter().map(|s| s.to_string()).collect())
    }

    fn caption_embed(&self, video: &VideoTensor) -> Result<CaptionEmbedding> {
        self.check_video(video)?;
        let tape = Tape::new();
        let frames = tape.constant(video.data.clone());
        let emb = self.caption_embed_t(&tape, frames);
        CaptionEmbedding::new(tape.value(emb).iter().copied().collect())
    }

    fn sync_confidence(&self, video: &VideoTensor, audio: &AudioClip) -> Result<f64> {
        self.confidence(video, audio)
    }
}
