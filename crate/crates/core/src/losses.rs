//! Training losses: lip-sync offset, segment-wise valence/arousal, action
//! units, attribute-action cosine, and the standard noise-prediction MSE,
//! plus the weighted total with per-component reporting.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::emotion::VASequence;
use crate::error::{Error, Result};

/// Detected audio-visual misalignment: magnitude in seconds and the timestamp
/// (seconds) where it was localized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncEstimate {
    pub offset_magnitude: f64,
    pub timestamp: f64,
}

impl SyncEstimate {
    pub fn new(offset_magnitude: f64, timestamp: f64) -> Result<Self> {
        if offset_magnitude < 0.0 || !offset_magnitude.is_finite() || !timestamp.is_finite() {
            return Err(Error::invalid(format!(
                "sync estimate (dt={offset_magnitude}, t={timestamp}) invalid"
            )));
        }
        Ok(Self { offset_magnitude, timestamp })
    }
}

/// `[T x N]` action-unit intensities with their identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct AUMatrix {
    pub values: Array2<f64>,
    pub au_ids: Vec<String>,
}

impl AUMatrix {
    pub fn new(values: Array2<f64>, au_ids: Vec<String>) -> Result<Self> {
        if values.nrows() < 1 || values.ncols() < 1 {
            return Err(Error::invalid("AU matrix must be at least 1x1"));
        }
        if values.ncols() != au_ids.len() {
            return Err(Error::shape(format!(
                "AU matrix has {} columns but {} ids",
                values.ncols(),
                au_ids.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("AU matrix".into()));
        }
        Ok(Self { values, au_ids })
    }
}

/// Caption embedding vector; a valid caption has strictly positive norm.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionEmbedding {
    pub vector: Vec<f64>,
}

impl CaptionEmbedding {
    pub fn new(vector: Vec<f64>) -> Result<Self> {
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("caption embedding".into()));
        }
        Ok(Self { vector })
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `(dt_p - dt_gt)^2 + (t_p - t_gt)^2`.
pub fn sync_loss(pred: &SyncEstimate, gt: &SyncEstimate) -> f64 {
    let d = pred.offset_magnitude - gt.offset_magnitude;
    let t = pred.timestamp - gt.timestamp;
    d * d + t * t
}

/// Mean over segments of squared valence plus squared arousal differences.
pub fn emo_loss(pred: &VASequence, gt: &VASequence) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "VA sequences have {} vs {} segments; resample to a shared K first",
            pred.len(),
            gt.len()
        )));
    }
    let k = pred.len() as f64;
    let sum: f64 = pred
        .pairs()
        .iter()
        .zip(gt.pairs())
        .map(|(&(vp, ap), &(vg, ag))| (vp - vg) * (vp - vg) + (ap - ag) * (ap - ag))
        .sum();
    Ok(sum / k)
}

/// `1/(T*N) * sum of squared per-cell differences`.
pub fn au_loss(pred: &AUMatrix, gt: &AUMatrix) -> Result<f64> {
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
    let n = pred.values.len() as f64;
    let sum: f64 =
        pred.values.iter().zip(gt.values.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / n)
}

/// `1 - cos(e_p, e_gt)`; rejects zero-norm embeddings.
pub fn attr_action_loss(pred: &CaptionEmbedding, gt: &CaptionEmbedding) -> Result<f64> {
    if pred.vector.len() != gt.vector.len() {
        return Err(Error::shape(format!(
            "caption embeddings have dims {} vs {}",
            pred.vector.len(),
            gt.vector.len()
        )));
    }
    let (np, ng) = (pred.norm(), gt.norm());
    if np == 0.0 || ng == 0.0 {
        return Err(Error::invalid("zero-norm caption embedding"));
    }
    let dot: f64 = pred.vector.iter().zip(&gt.vector).map(|(a, b)| a * b).sum();
    Ok(1.0 - dot / (np * ng))
}

/// Plain MSE between noise prediction and true noise.
pub fn diffusion_simple_loss(pred: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::shape(format!("noise shapes {:?} vs {:?}", pred.dim(), target.dim())));
    }
    let n = pred.len() as f64;
    Ok(pred.iter().zip(target.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

// --- Tape variants used during training -----------------------------------

/// Sync loss on the tape from `[1 x 1]` prediction vars and scalar targets.
pub fn sync_loss_t(tape: &Tape, dt_p: Var, t_p: Var, gt: &SyncEstimate) -> Var {
    let dd = tape.add_scalar(dt_p, -gt.offset_magnitude);
    let td = tape.add_scalar(t_p, -gt.timestamp);
    let d2 = tape.square(dd);
    let t2 = tape.square(td);
    tape.add(d2, t2)
}

/// Emotion loss on the tape: `pred` is `[K x 2]` interleaved (v, a) rows.
pub fn emo_loss_t(tape: &Tape, pred: Var, gt: &VASequence) -> Result<Var> {
    let (k, two) = tape.shape(pred);
    if k != gt.len() || two != 2 {
        return Err(Error::shape(format!(
            "predicted VA is [{k} x {two}], ground truth has {} segments",
            gt.len()
        )));
    }
    let gt_mat = Array2::from_shape_fn((k, 2), |(i, j)| {
        let (v, a) = gt.pairs()[i];
        if j == 0 { v } else { a }
    });
    let g = tape.constant(gt_mat);
    let diff = tape.sub(pred, g);
    let sq = tape.square(diff);
    let total = tape.sum_all(sq);
    Ok(tape.scale(total, 1.0 / k as f64))
}

/// AU loss on the tape: mean squared difference over `[T x N]` entries.
pub fn au_loss_t(tape: &Tape, pred: Var, gt: &AUMatrix) -> Result<Var> {
    let shape = tape.shape(pred);
    if shape != gt.values.dim() {
        return Err(Error::shape(format!("AU shapes {:?} vs {:?}", shape, gt.values.dim())));
    }
    let g = tape.constant(gt.values.clone());
    Ok(tape.mse(pred, g))
}

/// Cosine attribute-action loss on the tape; `pred` is `[1 x D]`.
pub fn attr_action_loss_t(tape: &Tape, pred: Var, gt: &CaptionEmbedding) -> Result<Var> {
    let (_, d) = tape.shape(pred);
    if d != gt.vector.len() {
        return Err(Error::shape(format!(
            "caption embeddings have dims {d} vs {}",
            gt.vector.len()
        )));
    }
    let ng = gt.norm();
    if ng == 0.0 {
        return Err(Error::invalid("zero-norm ground-truth caption embedding"));
    }
    let g = tape.constant(Array2::from_shape_fn((1, d), |(_, j)| gt.vector[j]));
    let dot_terms = tape.mul(pred, g);
    let dot = tape.sum_all(dot_terms);
    let p2 = tape.square(pred);
    let p2s = tape.sum_all(p2);
    let p2s = tape.add_scalar(p2s, 1e-12);
    let np = tape.sqrt(p2s);
    let cos = tape.div_scalar_var(dot, np);
    let cos = tape.scale(cos, 1.0 / ng);
    let neg = tape.scale(cos, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

// --- Weighted total and reporting ------------------------------------------

/// Per-component weights applied by [`total_loss`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    pub sync: f64,
    pub emo: f64,
    pub au: f64,
    pub attr: f64,
    pub simple: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { sync: 0.1, emo: 0.1, au: 0.1, attr: 0.05, simple: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in
            [("sync", self.sync), ("emo", self.emo), ("au", self.au), ("attr", self.attr), ("simple", self.simple)]
        {
            if w < 0.0 || !w.is_finite() {
                return Err(Error::invalid(format!("loss weight {name} = {w} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// One line of the JSON-lines loss report.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossLine {
    pub step: u64,
    pub component: String,
    pub raw: f64,
    pub weight: f64,
    pub weighted: f64,
}

/// Weighted sum of named components. Returns the total and one report line
/// per component (in input order).
pub fn total_loss(step: u64, components: &[(&str, f64, f64)]) -> Result<(f64, Vec<LossLine>)> {
    let mut total = 0.0;
    let mut lines = Vec::with_capacity(components.len());
    for &(name, raw, weight) in components {
        if weight < 0.0 || !weight.is_finite() {
            return Err(Error::invalid(format!("loss weight for {name} = {weight} must be >= 0")));
        }
        let weighted = raw * weight;
        total += weighted;
        lines.push(LossLine {
            step,
            component: name.to_string(),
            raw,
            weight,
            weighted,
        });
    }
    Ok((total, lines))
}

/// Tape version: weighted sum of `[1 x 1]` component vars.
pub fn total_loss_t(tape: &Tape, components: &[(&str, Var, f64)]) -> Result<Var> {
    let mut acc = tape.constant_scalar(0.0);
    for &(name, v, weight) in components {
        if weight < 0.0 || !weight.is_finite() {
            return Err(Error::invalid(format!("loss weight for {name} = {weight} must be >= 0")));
        }
        let w = tape.scale(v, weight);
        acc = tape.add(acc, w);
    }
    Ok(acc)
}

/// Append report lines to a JSON-lines writer.
pub fn write_loss_lines(out: &mut dyn std::io::Write, lines: &[LossLine]) -> Result<()> {
    for line in lines {
        serde_json::to_writer(&mut *out, line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(pairs: Vec<(f64, f64)>) -> VASequence {
        let spans = (0..pairs.len()).map(|i| (i as f64, i as f64 + 2.0)).collect();
        VASequence::new(pairs, spans).unwrap()
    }

    #[test]
    fn sync_loss_worked_examples() {
        let gt = SyncEstimate::new(0.0, 1.0).unwrap();
        assert_eq!(sync_loss(&gt, &gt), 0.0);
        let p = SyncEstimate::new(0.5, 1.0).unwrap();
        assert!((sync_loss(&p, &gt) - 0.25).abs() < 1e-12);
        let p2 = SyncEstimate::new(0.3, 2.0).unwrap();
        let g2 = SyncEstimate::new(0.1, 1.5).unwrap();
        assert!((sync_loss(&p2, &g2) - 0.29).abs() < 1e-12);
    }

    #[test]
    fn emo_loss_worked_examples() {
        let a = seq(vec![(0.5, -0.5), (0.1, 0.2)]);
        assert_eq!(emo_loss(&a, &a).unwrap(), 0.0);

        let p = seq(vec![(1.0, 0.0)]);
        let g = seq(vec![(0.0, 0.0)]);
        assert!((emo_loss(&p, &g).unwrap() - 1.0).abs() < 1e-12);

        let p2 = seq(vec![(1.0, 0.0), (0.0, 1.0)]);
        let g2 = seq(vec![(0.0, 0.0), (0.0, 0.0)]);
        assert!((emo_loss(&p2, &g2).unwrap() - 1.0).abs() < 1e-12);

        let short = seq(vec![(0.0, 0.0)]);
        assert!(emo_loss(&p2, &short).is_err());
    }

    #[test]
    fn au_loss_worked_examples() {
        let ids: Vec<String> = ["a", "b"].map(String::from).to_vec();
        let m = AUMatrix::new(Array2::from_elem((2, 2), 0.5), ids.clone()).unwrap();
        assert_eq!(au_loss(&m, &m).unwrap(), 0.0);

        let p = AUMatrix::new(Array2::from_elem((2, 2), 1.0), ids.clone()).unwrap();
        let g = AUMatrix::new(Array2::zeros((2, 2)), ids.clone()).unwrap();
        assert!((au_loss(&p, &g).unwrap() - 1.0).abs() < 1e-12);

        let ids3: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
        let p3 = AUMatrix::new(
            Array2::from_shape_vec((1, 3), vec![0.5, 0.0, 1.0]).unwrap(),
            ids3.clone(),
        )
        .unwrap();
        let g3 = AUMatrix::new(Array2::zeros((1, 3)), ids3).unwrap();
        let expect = (0.25 + 0.0 + 1.0) / 3.0;
        assert!((au_loss(&p3, &g3).unwrap() - expect).abs() < 1e-9);
        assert!((expect - 0.41667).abs() < 1e-5);

        let other_ids: Vec<String> = ["x", "y"].map(String::from).to_vec();
        let q = AUMatrix::new(Array2::zeros((2, 2)), other_ids).unwrap();
        assert!(au_loss(&p, &q).is_err(), "mismatched ids must be rejected");
    }

    #[test]
    fn attr_loss_worked_examples() {
        let e = CaptionEmbedding::new(vec![0.3, -0.4, 1.0]).unwrap();
        assert!(attr_action_loss(&e, &e).unwrap().abs() < 1e-12);

        let x = CaptionEmbedding::new(vec![1.0, 0.0]).unwrap();
        let y = CaptionEmbedding::new(vec![0.0, 1.0]).unwrap();
        assert!((attr_action_loss(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let neg = CaptionEmbedding::new(vec![-1.0, 0.0]).unwrap();
        assert!((attr_action_loss(&x, &neg).unwrap() - 2.0).abs() < 1e-12);

        let s = 1.0 / 2f64.sqrt();
        let diag = CaptionEmbedding::new(vec![s, s]).unwrap();
        let l = attr_action_loss(&x, &diag).unwrap();
        assert!((l - (1.0 - s)).abs() < 1e-12);
        assert!((l - 0.29289).abs() < 1e-5);

        let zero = CaptionEmbedding::new(vec![0.0, 0.0]).unwrap();
        assert!(attr_action_loss(&x, &zero).is_err());
    }

    #[test]
    fn attr_loss_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ea = CaptionEmbedding::new(a.clone()).unwrap();
            let eb = CaptionEmbedding::new(b.clone()).unwrap();
            let scale = rng.gen_range(0.1..10.0);
            let eas = CaptionEmbedding::new(a.iter().map(|v| v * scale).collect()).unwrap();
            let l1 = attr_action_loss(&ea, &eb).unwrap();
            let l2 = attr_action_loss(&eas, &eb).unwrap();
            assert!((l1 - l2).abs() < 1e-10, "cosine must ignore positive scaling");
        }
    }

    #[test]
    fn simple_loss_matches_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Array2::from_shape_fn((5, 7), |_| rng.gen_range(-2.0..2.0));
        let b = Array2::from_shape_fn((5, 7), |_| rng.gen_range(-2.0..2.0));
        let got = diffusion_simple_loss(&a, &b).unwrap();
        let mut sum = 0.0;
        for i in 0..5 {
            for j in 0..7 {
                let d = a[(i, j)] - b[(i, j)];
                sum += d * d;
            }
        }
        assert!((got - sum / 35.0).abs() < 1e-7);
        assert_eq!(diffusion_simple_loss(&a, &a).unwrap(), 0.0);
        let ones = Array2::from_elem((2, 2), 1.0);
        let zeros = Array2::zeros((2, 2));
        assert_eq!(diffusion_simple_loss(&zeros, &ones).unwrap(), 1.0);
    }

    #[test]
    fn losses_are_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = seq(vec![(0.3, 0.2), (-0.4, 0.6)]);
        let g = seq(vec![(0.1, -0.2), (0.5, 0.0)]);
        assert_eq!(emo_loss(&p, &g).unwrap(), emo_loss(&g, &p).unwrap());

        let ids: Vec<String> = ["a", "b"].map(String::from).to_vec();
        let m1 = AUMatrix::new(Array2::from_shape_fn((3, 2), |_| rng.gen_range(0.0..1.0)), ids.clone()).unwrap();
        let m2 = AUMatrix::new(Array2::from_shape_fn((3, 2), |_| rng.gen_range(0.0..1.0)), ids).unwrap();
        assert_eq!(au_loss(&m1, &m2).unwrap(), au_loss(&m2, &m1).unwrap());

        let s1 = SyncEstimate::new(0.2, 1.0).unwrap();
        let s2 = SyncEstimate::new(0.5, 3.0).unwrap();
        assert_eq!(sync_loss(&s1, &s2), sync_loss(&s2, &s1));

        let e1 = CaptionEmbedding::new(vec![0.2, 0.9, -0.1]).unwrap();
        let e2 = CaptionEmbedding::new(vec![-0.5, 0.3, 0.8]).unwrap();
        let d = (attr_action_loss(&e1, &e2).unwrap() - attr_action_loss(&e2, &e1).unwrap()).abs();
        assert!(d < 1e-12);
    }

    #[test]
    fn emo_loss_random_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let k = 5;
        let pp: Vec<(f64, f64)> =
            (0..k).map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let gg: Vec<(f64, f64)> =
            (0..k).map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let got = emo_loss(&seq(pp.clone()), &seq(gg.clone())).unwrap();
        let mut sum = 0.0;
        for i in 0..k {
            sum += (pp[i].0 - gg[i].0).powi(2) + (pp[i].1 - gg[i].1).powi(2);
        }
        assert!((got - sum / k as f64).abs() < 1e-7);
    }

    #[test]
    fn tape_losses_match_plain_and_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        // emo
        let gt = seq(vec![(0.1, -0.2), (0.4, 0.3), (-0.6, 0.0)]);
        let pred0 = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-0.9..0.9));
        {
            let tape = Tape::new();
            let p = tape.leaf(pred0.clone());
            let l = emo_loss_t(&tape, p, &gt).unwrap();
            let pred_seq = seq((0..3).map(|i| (pred0[(i, 0)], pred0[(i, 1)])).collect());
            assert!(
                (tape.scalar_value(l) - emo_loss(&pred_seq, &gt).unwrap()).abs() < 1e-12
            );
            let grads = tape.backward(l);
            let g = grads.get(p).unwrap().clone();
            let fd = central_diff(
                |x| {
                    let mut p2 = pred0.clone();
                    p2[(1, 0)] = x;
                    let t = Tape::new();
                    let v = t.leaf(p2);
                    t.scalar_value(emo_loss_t(&t, v, &gt).unwrap())
                },
                pred0[(1, 0)],
                1e-6,
            );
            assert!(max_rel_err(g[(1, 0)], fd) < 1e-5);
        }
        // attr
        let gt_e = CaptionEmbedding::new(vec![0.5, -0.3, 0.8, 0.1]).unwrap();
        let pred_e0 = Array2::from_shape_fn((1, 4), |_| rng.gen_range(-0.9..0.9));
        {
            let tape = Tape::new();
            let p = tape.leaf(pred_e0.clone());
            let l = attr_action_loss_t(&tape, p, &gt_e).unwrap();
            let plain = attr_action_loss(
                &CaptionEmbedding::new(pred_e0.iter().copied().collect()).unwrap(),
                &gt_e,
            )
            .unwrap();
            assert!((tape.scalar_value(l) - plain).abs() < 1e-9);
            let grads = tape.backward(l);
            let g = grads.get(p).unwrap().clone();
            for j in 0..4 {
                let fd = central_diff(
                    |x| {
                        let mut p2 = pred_e0.clone();
                        p2[(0, j)] = x;
                        let t = Tape::new();
                        let v = t.leaf(p2);
                        t.scalar_value(attr_action_loss_t(&t, v, &gt_e).unwrap())
                    },
                    pred_e0[(0, j)],
                    1e-6,
                );
                assert!(max_rel_err(g[(0, j)], fd) < 1e-5, "dim {j}");
            }
        }
        // sync
        let gt_s = SyncEstimate::new(0.1, 1.5).unwrap();
        {
            let tape = Tape::new();
            let dt = tape.leaf(Array2::from_elem((1, 1), 0.3));
            let t = tape.leaf(Array2::from_elem((1, 1), 2.0));
            let l = sync_loss_t(&tape, dt, t, &gt_s);
            assert!((tape.scalar_value(l) - 0.29).abs() < 1e-12);
            let grads = tape.backward(l);
            // d/d(dt) (dt-0.1)^2 = 2*0.2 = 0.4
            assert!((grads.get(dt).unwrap()[(0, 0)] - 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_weighting_and_report() {
        let (t, lines) = total_loss(
            3,
            &[("simple", 0.5, 1.0), ("sync", 0.2, 0.1), ("emo", 0.4, 0.0)],
        )
        .unwrap();
        assert!((t - 0.52).abs() < 1e-12);
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1].component, "sync");
        assert!((lines[1].weighted - 0.02).abs() < 1e-12);
        assert_eq!(lines[2].weighted, 0.0);

        // Only the simple weight nonzero: total equals simple.
        let (t2, _) = total_loss(0, &[("simple", 0.7, 1.0), ("sync", 9.0, 0.0)]).unwrap();
        assert!((t2 - 0.7).abs() < 1e-12);

        // Empty set.
        let (t3, l3) = total_loss(0, &[]).unwrap();
        assert_eq!(t3, 0.0);
        assert!(l3.is_empty());

        assert!(total_loss(0, &[("x", 1.0, -0.5)]).is_err());
    }

    #[test]
    fn json_lines_roundtrip() {
        let lines = vec![
            LossLine { step: 1, component: "simple".into(), raw: 0.5, weight: 1.0, weighted: 0.5 },
            LossLine { step: 1, component: "sync".into(), raw: 0.2, weight: 0.1, weighted: 0.02 },
        ];
        let mut buf = Vec::new();
        write_loss_lines(&mut buf, &lines).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let parsed: Vec<LossLine> =
            text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(parsed, lines);
    }
}
