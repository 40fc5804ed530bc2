//! Evaluation metrics: PSNR, SSIM, concordance correlation, AU micro-F1,
//! Fréchet distance over feature statistics (with an expression-level
//! variant), and sync confidence via a pluggable scorer.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::losses::AUMatrix;
use crate::predictors::{PredictorSuite, SyntheticPredictors, AU_IDS};
use crate::video::VideoTensor;

/// Diagonal shrinkage added to covariances before matrix square roots.
pub const COV_SHRINKAGE: f64 = 1e-6;
/// Eigenvalues in `[-EIG_CLAMP, 0)` are treated as exact zeros; anything
/// below that is a genuine indefiniteness error.
pub const EIG_CLAMP: f64 = 1e-8;

/// A single image: `[C x H x W]` pixels in `[0, 1]`, channel-major
/// (`c * H * W + y * W + x`), matching [`VideoTensor`] frame layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameImage {
    data: Vec<f64>,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl FrameImage {
    pub fn new(data: Vec<f64>, c: usize, h: usize, w: usize) -> Result<Self> {
        if c == 0 || h == 0 || w == 0 || data.len() != c * h * w {
            return Err(Error::shape(format!(
                "frame data has {} values for shape {c}x{h}x{w}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::invalid("frame pixels must be finite and within [0, 1]"));
        }
        Ok(Self { data, c, h, w })
    }

    /// Extract one frame from a video, clamping pixels into `[0, 1]`
    /// (generated frames can overshoot the displayable range slightly).
    pub fn from_video_frame(video: &VideoTensor, frame: usize) -> Result<Self> {
        if frame >= video.num_frames() {
            return Err(Error::invalid(format!(
                "frame {frame} out of range for {}-frame video",
                video.num_frames()
            )));
        }
        let row = video.frame(frame);
        let data = row.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self::new(data, video.c, video.h, video.w)
    }

    pub fn pixel(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[c * self.h * self.w + y * self.w + x]
    }

    fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }
}

/// Peak signal-to-noise ratio in dB on unit-range images:
/// `10 * log10(1 / MSE)`. Identical images return `f64::INFINITY`.
pub fn psnr(a: &FrameImage, b: &FrameImage) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("frames {:?} vs {:?}", a.shape(), b.shape())));
    }
    let n = a.data.len() as f64;
    let mse: f64 =
        a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// SSIM window shape. The default is an 8x8 uniform window sized for toy
/// resolution; `Gaussian11` restores the reference 11x11, sigma 1.5 kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SsimWindow {
    Uniform(usize),
    Gaussian11,
}

/// SSIM parameters; constants are the standard `C1=(0.01)^2`, `C2=(0.03)^2`
/// for unit dynamic range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimOptions {
    pub window: SsimWindow,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimOptions {
    fn default() -> Self {
        Self { window: SsimWindow::Uniform(8), c1: 1e-4, c2: 9e-4 }
    }
}

/// Mean local structural similarity over all valid window positions and
/// channels, in `[-1, 1]`.
pub fn ssim(a: &FrameImage, b: &FrameImage, opts: &SsimOptions) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("frames {:?} vs {:?}", a.shape(), b.shape())));
    }
    match opts.window {
        SsimWindow::Uniform(win) => {
            if win == 0 {
                return Err(Error::invalid("SSIM window must be at least 1"));
            }
            if a.h < win || a.w < win {
                return Err(Error::invalid(format!(
                    "image {}x{} smaller than {win}x{win} SSIM window",
                    a.h, a.w
                )));
            }
            ssim_uniform(a, b, win, opts.c1, opts.c2)
        }
        SsimWindow::Gaussian11 => {
            let win = 11;
            if a.h < win || a.w < win {
                return Err(Error::invalid(format!(
                    "image {}x{} smaller than {win}x{win} SSIM window",
                    a.h, a.w
                )));
            }
            ssim_gaussian11(a, b, opts.c1, opts.c2)
        }
    }
}

/// Summed-area table: `s[(y, x)]` holds the sum over the rectangle
/// `[0, y) x [0, x)`, so any window sum is four lookups.
fn summed_area(plane: impl Fn(usize, usize) -> f64, h: usize, w: usize) -> Vec<f64> {
    let stride = w + 1;
    let mut s = vec![0.0; (h + 1) * stride];
    for y in 0..h {
        let mut row_acc = 0.0;
        for x in 0..w {
            row_acc += plane(y, x);
            s[(y + 1) * stride + x + 1] = s[y * stride + x + 1] + row_acc;
        }
    }
    s
}

fn window_sum(s: &[f64], stride: usize, y0: usize, x0: usize, win: usize) -> f64 {
    let (y1, x1) = (y0 + win, x0 + win);
    s[y1 * stride + x1] - s[y0 * stride + x1] - s[y1 * stride + x0] + s[y0 * stride + x0]
}

fn local_ssim(
    mu_a: f64,
    mu_b: f64,
    var_a: f64,
    var_b: f64,
    cov: f64,
    c1: f64,
    c2: f64,
) -> f64 {
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

fn ssim_uniform(a: &FrameImage, b: &FrameImage, win: usize, c1: f64, c2: f64) -> Result<f64> {
    let (h, w) = (a.h, a.w);
    let stride = w + 1;
    let n = (win * win) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..a.c {
        let pa = |y: usize, x: usize| a.pixel(ch, y, x);
        let pb = |y: usize, x: usize| b.pixel(ch, y, x);
        let sa = summed_area(pa, h, w);
        let sb = summed_area(pb, h, w);
        let saa = summed_area(|y, x| pa(y, x) * pa(y, x), h, w);
        let sbb = summed_area(|y, x| pb(y, x) * pb(y, x), h, w);
        let sab = summed_area(|y, x| pa(y, x) * pb(y, x), h, w);
        for y0 in 0..=(h - win) {
            for x0 in 0..=(w - win) {
                let mu_a = window_sum(&sa, stride, y0, x0, win) / n;
                let mu_b = window_sum(&sb, stride, y0, x0, win) / n;
                let var_a = window_sum(&saa, stride, y0, x0, win) / n - mu_a * mu_a;
                let var_b = window_sum(&sbb, stride, y0, x0, win) / n - mu_b * mu_b;
                let cov = window_sum(&sab, stride, y0, x0, win) / n - mu_a * mu_b;
                total += local_ssim(mu_a, mu_b, var_a, var_b, cov, c1, c2);
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

fn ssim_gaussian11(a: &FrameImage, b: &FrameImage, c1: f64, c2: f64) -> Result<f64> {
    const WIN: usize = 11;
    const SIGMA: f64 = 1.5;
    let mut kernel = [[0.0; WIN]; WIN];
    let mut norm = 0.0;
    for (i, row) in kernel.iter_mut().enumerate() {
        for (j, k) in row.iter_mut().enumerate() {
            let dy = i as f64 - (WIN as f64 - 1.0) / 2.0;
            let dx = j as f64 - (WIN as f64 - 1.0) / 2.0;
            *k = (-(dy * dy + dx * dx) / (2.0 * SIGMA * SIGMA)).exp();
            norm += *k;
        }
    }
    for row in kernel.iter_mut() {
        for k in row.iter_mut() {
            *k /= norm;
        }
    }

    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..a.c {
        for y0 in 0..=(a.h - WIN) {
            for x0 in 0..=(a.w - WIN) {
                let (mut mu_a, mut mu_b) = (0.0, 0.0);
                let (mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0);
                for (i, row) in kernel.iter().enumerate() {
                    for (j, &k) in row.iter().enumerate() {
                        let va = a.pixel(ch, y0 + i, x0 + j);
                        let vb = b.pixel(ch, y0 + i, x0 + j);
                        mu_a += k * va;
                        mu_b += k * vb;
                        maa += k * va * va;
                        mbb += k * vb * vb;
                        mab += k * va * vb;
                    }
                }
                let var_a = maa - mu_a * mu_a;
                let var_b = mbb - mu_b * mu_b;
                let cov = mab - mu_a * mu_b;
                total += local_ssim(mu_a, mu_b, var_a, var_b, cov, c1, c2);
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Concordance correlation coefficient with population moments:
/// `2*cov(x,y) / (var(x) + var(y) + (mean(x) - mean(y))^2)`, in `[-1, 1]`.
///
/// Two identical constant sequences agree perfectly and return 1; a constant
/// against a varying sequence has zero covariance and returns 0.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(format!("sequences of length {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::invalid("concordance needs at least 2 samples"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("concordance input".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let vx = x.iter().map(|v| (v - mx) * (v - mx)).sum::<f64>() / n;
    let vy = y.iter().map(|v| (v - my) * (v - my)).sum::<f64>() / n;
    let cov = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    let denom = vx + vy + (mx - my) * (mx - my);
    if denom == 0.0 {
        // Both constant with equal means: the sequences are identical.
        return Ok(1.0);
    }
    Ok(2.0 * cov / denom)
}

/// Micro-averaged F1 over all binarized AU cells; intensities strictly above
/// `threshold` count as occurrences. With no positives on either side the
/// score is defined as 0.
pub fn f1_au(pred: &AUMatrix, gt: &AUMatrix, threshold: f64) -> Result<f64> {
    if pred.values.dim() != gt.values.dim() {
        return Err(Error::shape(format!(
            "AU matrices {:?} vs {:?}",
            pred.values.dim(),
            gt.values.dim()
        )));
    }
    if pred.au_ids != gt.au_ids {
        return Err(Error::invalid("AU id lists differ between prediction and ground truth"));
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (p, g) in pred.values.iter().zip(gt.values.iter()) {
        match (*p > threshold, *g > threshold) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64))
}

/// First and second moments of a feature set: mean vector, population
/// covariance, and the sample count they were estimated from.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub covariance: Array2<f64>,
    pub n_samples: usize,
}

impl FeatureStats {
    pub fn new(mean: Vec<f64>, covariance: Array2<f64>, n_samples: usize) -> Result<Self> {
        let d = mean.len();
        if d == 0 || covariance.dim() != (d, d) {
            return Err(Error::shape(format!(
                "mean has dim {d}, covariance is {:?}",
                covariance.dim()
            )));
        }
        if n_samples == 0 {
            return Err(Error::invalid("feature stats need at least one sample"));
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature stats".into()));
        }
        let asym = (0..d)
            .flat_map(|i| (0..d).map(move |j| (i, j)))
            .map(|(i, j)| (covariance[(i, j)] - covariance[(j, i)]).abs())
            .fold(0.0, f64::max);
        if asym > 1e-8 {
            return Err(Error::invalid(format!("covariance asymmetric by {asym:.3e}")));
        }
        let min_eig = sym_eigenvalues(&covariance).into_iter().fold(f64::INFINITY, f64::min);
        if min_eig < -EIG_CLAMP {
            return Err(Error::invalid(format!(
                "covariance has negative eigenvalue {min_eig:.3e}"
            )));
        }
        Ok(Self { mean, covariance, n_samples })
    }

    /// Population moments of `[N x D]` sample rows.
    pub fn from_samples(rows: &Array2<f64>) -> Result<Self> {
        let (n, d) = rows.dim();
        if n == 0 || d == 0 {
            return Err(Error::invalid("feature stats need a non-empty sample matrix"));
        }
        let mut mean = vec![0.0; d];
        for row in rows.rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut cov = Array2::zeros((d, d));
        for row in rows.rows() {
            for i in 0..d {
                let di = row[i] - mean[i];
                for j in i..d {
                    cov[(i, j)] += di * (row[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[(i, j)] / n as f64;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        Self::new(mean, cov, n)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Combine two partial statistics as if their samples had been pooled;
    /// exact for population moments.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::shape(format!(
                "cannot merge stats of dims {} and {}",
                self.dim(),
                other.dim()
            )));
        }
        let d = self.dim();
        let (n1, n2) = (self.n_samples as f64, other.n_samples as f64);
        let n = n1 + n2;
        let delta: Vec<f64> =
            (0..d).map(|i| other.mean[i] - self.mean[i]).collect();
        let mean: Vec<f64> =
            (0..d).map(|i| self.mean[i] + delta[i] * n2 / n).collect();
        let mut cov = Array2::zeros((d, d));
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] = (n1 * self.covariance[(i, j)] + n2 * other.covariance[(i, j)]) / n
                    + (n1 * n2 / (n * n)) * delta[i] * delta[j];
            }
        }
        Self::new(mean, cov, self.n_samples + other.n_samples)
    }
}

fn to_dmatrix(m: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn sym_eigenvalues(m: &Array2<f64>) -> Vec<f64> {
    to_dmatrix(m).symmetric_eigen().eigenvalues.iter().copied().collect()
}

/// Symmetric PSD square root via eigendecomposition; eigenvalues within
/// `EIG_CLAMP` below zero are rounded up to zero.
fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = m.clone().symmetric_eigen();
    let mut vals = eig.eigenvalues;
    for v in vals.iter_mut() {
        if *v < -EIG_CLAMP {
            return Err(Error::invalid(format!(
                "matrix square root of indefinite matrix (eigenvalue {v:.3e})"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = eig.eigenvectors;
    Ok(&q * DMatrix::from_diagonal(&vals) * q.transpose())
}

/// Fréchet distance between two Gaussians summarized by their stats:
/// `||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2})`, with diagonal
/// shrinkage applied to both covariances first.
pub fn frechet_distance(s1: &FeatureStats, s2: &FeatureStats) -> Result<f64> {
    if s1.dim() != s2.dim() {
        return Err(Error::shape(format!(
            "feature stats have dims {} vs {}",
            s1.dim(),
            s2.dim()
        )));
    }
    let d = s1.dim();
    let mean_term: f64 =
        (0..d).map(|i| (s1.mean[i] - s2.mean[i]).powi(2)).sum();

    let mut c1 = to_dmatrix(&s1.covariance);
    let mut c2 = to_dmatrix(&s2.covariance);
    for i in 0..d {
        c1[(i, i)] += COV_SHRINKAGE;
        c2[(i, i)] += COV_SHRINKAGE;
    }
    let a = sym_sqrt(&c1)?;
    let inner = &a * &c2 * &a;
    // Symmetrize before the second decomposition; the product is symmetric
    // in exact arithmetic but accumulates round-off.
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = inner.symmetric_eigen();
    let mut tr_sqrt = 0.0;
    for v in eig.eigenvalues.iter() {
        if *v < -EIG_CLAMP {
            return Err(Error::invalid(format!(
                "cross-covariance product indefinite (eigenvalue {v:.3e})"
            )));
        }
        tr_sqrt += v.max(0.0).sqrt();
    }
    let trace_term = c1.trace() + c2.trace() - 2.0 * tr_sqrt;
    // Round-off guard: the distance is nonnegative by construction.
    Ok((mean_term + trace_term).max(0.0))
}

/// Per-frame expression parameters for distribution-level comparison.
pub trait ExpressionExtractor {
    /// Version tag recorded in metric reports.
    fn version(&self) -> String;
    fn dim(&self) -> usize;
    /// `[F x D]` parameter rows for one video.
    fn extract(&self, video: &VideoTensor) -> Result<Array2<f64>>;
}

impl ExpressionExtractor for SyntheticPredictors {
    fn version(&self) -> String {
        "synthetic-au-v1".into()
    }

    fn dim(&self) -> usize {
        AU_IDS.len()
    }

    fn extract(&self, video: &VideoTensor) -> Result<Array2<f64>> {
        Ok(self.au_detect(video)?.values)
    }
}

/// Pooled per-frame expression statistics over a set of videos.
pub fn expression_stats(
    videos: &[VideoTensor],
    extractor: &dyn ExpressionExtractor,
) -> Result<FeatureStats> {
    if videos.is_empty() {
        return Err(Error::invalid("expression stats need at least one video"));
    }
    let mut stats: Option<FeatureStats> = None;
    for v in videos {
        let rows = extractor.extract(v)?;
        let s = FeatureStats::from_samples(&rows)?;
        stats = Some(match stats {
            None => s,
            Some(prev) => prev.merge(&s)?,
        });
    }
    Ok(stats.expect("at least one video"))
}

/// Expression-level Fréchet distance between generated and reference sets.
pub fn e_fid(
    pred: &[VideoTensor],
    gt: &[VideoTensor],
    extractor: &dyn ExpressionExtractor,
) -> Result<f64> {
    frechet_distance(&expression_stats(pred, extractor)?, &expression_stats(gt, extractor)?)
}

/// Audio-visual sync confidence from the given scorer.
pub fn sync_confidence(
    video: &VideoTensor,
    audio: &AudioClip,
    scorer: &dyn PredictorSuite,
) -> Result<f64> {
    scorer.sync_confidence(video, audio)
}

/// One metric value plus the version tag of whatever scored it.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricEntry {
    pub value: f64,
    pub scorer: String,
}

/// Named metric values with provenance. Every entry carries its scorer
/// version; serialized as JSON.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct MetricReport {
    pub clip_ids: Vec<String>,
    pub config_hash: String,
    pub metrics: BTreeMap<String, MetricEntry>,
}

impl MetricReport {
    pub fn new(clip_ids: Vec<String>, config_hash: String) -> Self {
        Self { clip_ids, config_hash, metrics: BTreeMap::new() }
    }

    pub fn add(&mut self, name: &str, value: f64, scorer: &str) -> Result<()> {
        if scorer.is_empty() {
            return Err(Error::invalid(format!("metric {name} must name its scorer version")));
        }
        self.metrics
            .insert(name.to_string(), MetricEntry { value, scorer: scorer.to_string() });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).map(|e| e.value)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
