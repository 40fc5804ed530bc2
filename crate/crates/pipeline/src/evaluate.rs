//! Evaluation: the fixed metric suite over (generated, reference) clip
//! pairs, collected into a serializable report.
//!
//! Every metric goes through the metrics module; this file only aggregates
//! across clips and records scorer version tags, so report numbers are
//! traceable to the exact scorer that produced them.

use facetalk_core::audio::AudioClip;
use facetalk_core::autodiff::Tape;
use facetalk_core::losses::AUMatrix;
use facetalk_core::metrics::{
    ccc, e_fid, f1_au, frechet_distance, psnr, ssim, sync_confidence, FeatureStats, FrameImage,
    MetricReport, SsimOptions,
};
use facetalk_core::predictors::{PredictorSuite, SyntheticPredictors};
use facetalk_core::video::VideoTensor;
use facetalk_core::{Error, Result};
use ndarray::Array2;

use crate::config::PipelineConfig;

/// PSNR values above this are reported as exactly this, so that identical
/// frames (infinite PSNR) stay representable in JSON.
pub const PSNR_REPORT_CAP_DB: f64 = 300.0;

/// One generated clip with its reference and driving audio.
pub struct EvalClip<'a> {
    pub id: &'a str,
    pub pred: &'a VideoTensor,
    pub gt: &'a VideoTensor,
    pub audio: &'a AudioClip,
}

fn pooled_rows(predictors: &SyntheticPredictors, video: &VideoTensor) -> Array2<f64> {
    let tape = Tape::new();
    let frames = tape.constant(video.data.clone());
    tape.value(predictors.pooled_t(&tape, frames))
}

/// Score a set of clip pairs into one report.
pub fn evaluate_set(cfg: &PipelineConfig, clips: &[EvalClip]) -> Result<MetricReport> {
    if clips.is_empty() {
        return Err(Error::invalid("evaluation needs at least one clip pair"));
    }
    let (h, w) = (cfg.dataset.height, cfg.dataset.width);
    for c in clips {
        if c.pred.h != h || c.pred.w != w || c.gt.h != h || c.gt.w != w {
            return Err(Error::shape(format!(
                "clip {}: frames must be {h}x{w} (pred {}x{}, gt {}x{})",
                c.id, c.pred.h, c.pred.w, c.gt.h, c.gt.w
            )));
        }
        if c.pred.num_frames() != c.gt.num_frames() {
            return Err(Error::shape(format!(
                "clip {}: {} generated frames vs {} reference frames",
                c.id,
                c.pred.num_frames(),
                c.gt.num_frames()
            )));
        }
    }
    let predictors = SyntheticPredictors::new(3, h, w);
    let ssim_opts = SsimOptions::default();

    // Pixel metrics: frame-mean PSNR and SSIM over every frame in the set.
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    let mut n_frames = 0usize;
    for c in clips {
        for f in 0..c.pred.num_frames() {
            let a = FrameImage::from_video_frame(c.pred, f)?;
            let b = FrameImage::from_video_frame(c.gt, f)?;
            psnr_sum += psnr(&a, &b)?.min(PSNR_REPORT_CAP_DB);
            ssim_sum += ssim(&a, &b, &ssim_opts)?;
            n_frames += 1;
        }
    }

    // Valence/arousal agreement between the two videos' tracks.
    let mut v_pred = Vec::new();
    let mut v_gt = Vec::new();
    let mut a_pred = Vec::new();
    let mut a_gt = Vec::new();
    for c in clips {
        let tp = predictors.va_track(c.pred)?;
        let tg = predictors.va_track(c.gt)?;
        v_pred.extend(tp.column(0).iter().copied());
        a_pred.extend(tp.column(1).iter().copied());
        v_gt.extend(tg.column(0).iter().copied());
        a_gt.extend(tg.column(1).iter().copied());
    }

    // Action units, micro-averaged across the whole set.
    let mut au_pred_rows: Option<AUMatrix> = None;
    let mut au_gt_rows: Option<AUMatrix> = None;
    let mut stats_pred: Option<FeatureStats> = None;
    let mut stats_gt: Option<FeatureStats> = None;
    let mut sync_pred_sum = 0.0;
    let mut sync_gt_sum = 0.0;
    for c in clips {
        let ap = predictors.au_detect(c.pred)?;
        let ag = predictors.au_detect(c.gt)?;
        au_pred_rows = Some(match au_pred_rows {
            None => ap,
            Some(prev) => stack_au(prev, ap)?,
        });
        au_gt_rows = Some(match au_gt_rows {
            None => ag,
            Some(prev) => stack_au(prev, ag)?,
        });
        let sp = FeatureStats::from_samples(&pooled_rows(&predictors, c.pred))?;
        let sg = FeatureStats::from_samples(&pooled_rows(&predictors, c.gt))?;
        stats_pred = Some(match stats_pred {
            None => sp,
            Some(prev) => prev.merge(&sp)?,
        });
        stats_gt = Some(match stats_gt {
            None => sg,
            Some(prev) => prev.merge(&sg)?,
        });
        sync_pred_sum += sync_confidence(c.pred, c.audio, &predictors)?;
        sync_gt_sum += sync_confidence(c.gt, c.audio, &predictors)?;
    }
    let au_p = au_pred_rows.expect("non-empty set");
    let au_g = au_gt_rows.expect("non-empty set");

    let preds: Vec<VideoTensor> = clips.iter().map(|c| c.pred.clone()).collect();
    let gts: Vec<VideoTensor> = clips.iter().map(|c| c.gt.clone()).collect();

    let mut report = MetricReport::new(
        clips.iter().map(|c| c.id.to_string()).collect(),
        cfg.hash(),
    );
    let n = clips.len() as f64;
    report.add("psnr", psnr_sum / n_frames as f64, "psnr-frame-mean-v1-cap300")?;
    report.add("ssim", ssim_sum / n_frames as f64, "ssim-uniform8-v1")?;
    report.add("ccc_v", ccc(&v_pred, &v_gt)?, "ccc-va-track-v1")?;
    report.add("ccc_a", ccc(&a_pred, &a_gt)?, "ccc-va-track-v1")?;
    report.add("f1_au", f1_au(&au_p, &au_g, 0.5)?, "f1-au-v1-thr0.5")?;
    report.add(
        "fid",
        frechet_distance(&stats_pred.expect("set"), &stats_gt.expect("set"))?,
        "fid-pooled48-v1",
    )?;
    report.add("e_fid", e_fid(&preds, &gts, &predictors)?, "e-fid-synthetic-au-v1")?;
    report.add("sync_conf", sync_pred_sum / n, "sync-conf-synthetic-v1")?;
    report.add("sync_conf_gt", sync_gt_sum / n, "sync-conf-synthetic-v1")?;
    Ok(report)
}

fn stack_au(a: AUMatrix, b: AUMatrix) -> Result<AUMatrix> {
    if a.au_ids != b.au_ids {
        return Err(Error::invalid("AU id sets differ between clips"));
    }
    let mut values = Array2::zeros((a.values.nrows() + b.values.nrows(), a.values.ncols()));
    values.slice_mut(ndarray::s![0..a.values.nrows(), ..]).assign(&a.values);
    values.slice_mut(ndarray::s![a.values.nrows().., ..]).assign(&b.values);
    AUMatrix::new(values, a.au_ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use facetalk_core::synth::generate_clip;

    fn cfg() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.dataset.min_duration_s = 0.8;
        cfg
    }

    fn clips(n: u64) -> Vec<(String, VideoTensor, AudioClip)> {
        (0..n)
            .map(|i| {
                let c = generate_clip(77, i, 1.2, 32, 32).unwrap();
                (c.id, c.video, c.audio)
            })
            .collect()
    }

    #[test]
    fn identical_sets_score_perfectly() {
        let cfg = cfg();
        let data = clips(2);
        let pairs: Vec<EvalClip> = data
            .iter()
            .map(|(id, v, a)| EvalClip { id, pred: v, gt: v, audio: a })
            .collect();
        let report = evaluate_set(&cfg, &pairs).unwrap();
        assert_eq!(report.get("psnr"), Some(PSNR_REPORT_CAP_DB));
        assert!((report.get("ssim").unwrap() - 1.0).abs() < 1e-12);
        assert!((report.get("ccc_v").unwrap() - 1.0).abs() < 1e-12);
        assert!((report.get("ccc_a").unwrap() - 1.0).abs() < 1e-12);
        assert!((report.get("f1_au").unwrap() - 1.0).abs() < 1e-12);
        assert!(report.get("fid").unwrap().abs() < 1e-6);
        assert!(report.get("e_fid").unwrap().abs() < 1e-6);
        assert!(
            (report.get("sync_conf").unwrap() - report.get("sync_conf_gt").unwrap()).abs()
                < 1e-12
        );

        // The report round-trips with its provenance intact.
        let json = report.to_json().unwrap();
        let back = MetricReport::from_json(&json).unwrap();
        assert_eq!(back.config_hash, cfg.hash());
        assert_eq!(back.clip_ids.len(), 2);
        assert_eq!(back.get("psnr"), report.get("psnr"));
    }

    #[test]
    fn perturbed_predictions_score_worse() {
        let cfg = cfg();
        let data = clips(2);
        let noisy: Vec<VideoTensor> = data
            .iter()
            .map(|(_, v, _)| {
                let shifted = v.data.mapv(|x| (x * 0.7 + 0.15).clamp(0.0, 1.0));
                VideoTensor::new(shifted, 3, 32, 32).unwrap()
            })
            .collect();
        let pairs: Vec<EvalClip> = data
            .iter()
            .zip(&noisy)
            .map(|((id, v, a), p)| EvalClip { id, pred: p, gt: v, audio: a })
            .collect();
        let report = evaluate_set(&cfg, &pairs).unwrap();
        assert!(report.get("psnr").unwrap() < PSNR_REPORT_CAP_DB);
        assert!(report.get("ssim").unwrap() < 1.0);
        assert!(report.get("fid").unwrap() > 1e-4);
        assert!(report.get("e_fid").unwrap() > 0.0);
    }

    #[test]
    fn frame_count_mismatch_is_rejected() {
        let cfg = cfg();
        let data = clips(1);
        let (id, v, a) = &data[0];
        let short = VideoTensor::new(
            v.data.slice(ndarray::s![0..10, ..]).to_owned(),
            3,
            32,
            32,
        )
        .unwrap();
        let err = evaluate_set(
            &cfg,
            &[EvalClip { id, pred: &short, gt: v, audio: a }],
        )
        .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)), "{err}");
    }

    #[test]
    fn report_values_match_direct_metric_calls() {
        let cfg = cfg();
        let data = clips(1);
        let (id, v, a) = &data[0];
        let pred = VideoTensor::new(
            v.data.mapv(|x| (x * 0.9 + 0.05).clamp(0.0, 1.0)),
            3,
            32,
            32,
        )
        .unwrap();
        let report =
            evaluate_set(&cfg, &[EvalClip { id, pred: &pred, gt: v, audio: a }]).unwrap();

        let predictors = SyntheticPredictors::new(3, 32, 32);
        let n = v.num_frames();
        let mut psnr_sum = 0.0;
        let mut ssim_sum = 0.0;
        for f in 0..n {
            let x = FrameImage::from_video_frame(&pred, f).unwrap();
            let y = FrameImage::from_video_frame(v, f).unwrap();
            psnr_sum += psnr(&x, &y).unwrap().min(PSNR_REPORT_CAP_DB);
            ssim_sum += ssim(&x, &y, &SsimOptions::default()).unwrap();
        }
        assert!((report.get("psnr").unwrap() - psnr_sum / n as f64).abs() < 1e-9);
        assert!((report.get("ssim").unwrap() - ssim_sum / n as f64).abs() < 1e-9);

        let tp = predictors.va_track(&pred).unwrap();
        let tg = predictors.va_track(v).unwrap();
        let cv = ccc(
            &tp.column(0).to_vec(),
            &tg.column(0).to_vec(),
        )
        .unwrap();
        assert!((report.get("ccc_v").unwrap() - cv).abs() < 1e-9);

        let f1 = f1_au(
            &predictors.au_detect(&pred).unwrap(),
            &predictors.au_detect(v).unwrap(),
            0.5,
        )
        .unwrap();
        assert!((report.get("f1_au").unwrap() - f1).abs() < 1e-9);

        let fid = frechet_distance(
            &FeatureStats::from_samples(&pooled_rows(&predictors, &pred)).unwrap(),
            &FeatureStats::from_samples(&pooled_rows(&predictors, v)).unwrap(),
        )
        .unwrap();
        assert!((report.get("fid").unwrap() - fid).abs() < 1e-9);

        let ef = e_fid(
            std::slice::from_ref(&pred),
            std::slice::from_ref(v),
            &predictors,
        )
        .unwrap();
        assert!((report.get("e_fid").unwrap() - ef).abs() < 1e-9);

        let sc = sync_confidence(&pred, a, &predictors).unwrap();
        assert!((report.get("sync_conf").unwrap() - sc).abs() < 1e-9);
    }
}
