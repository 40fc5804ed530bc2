//! Latent video diffusion: linear noise schedule, forward process, and the
//! deterministic DDIM sampler, generic over any noise predictor. The
//! denoising network itself lives in [`unet`].

pub mod unet;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{derive_rng, stream};

/// Diffusion schedule with the `alpha_bar(0) = 1` convention: `t` ranges
/// over `0..=T`, where `t = 0` is the clean sample.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas from `beta_start` to `beta_end` over `t_max` steps.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "betas ({beta_start}, {beta_end}) must satisfy 0 < start <= end < 1"
            )));
        }
        if t_max > 1 && beta_start == beta_end {
            return Err(Error::invalid("multi-step schedule needs beta_start < beta_end"));
        }
        let mut betas = Vec::with_capacity(t_max);
        let mut alphas_bar = Vec::with_capacity(t_max + 1);
        alphas_bar.push(1.0);
        for i in 0..t_max {
            let frac = if t_max == 1 { 0.0 } else { i as f64 / (t_max - 1) as f64 };
            let beta = beta_start + (beta_end - beta_start) * frac;
            betas.push(beta);
            alphas_bar.push(alphas_bar[i] * (1.0 - beta));
        }
        Ok(Self { betas, alphas_bar })
    }

    /// Toy default: T=100, linear betas in [1e-4, 0.02].
    pub fn default_toy() -> Self {
        Self::linear(100, 1e-4, 0.02).expect("valid default schedule")
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        assert!((1..=self.t_max()).contains(&t), "beta index {t} out of range");
        self.betas[t - 1]
    }

    /// Cumulative product for `t` in `0..=T`; `alpha_bar(0) = 1` exactly.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.t_max(), "alpha_bar index {t} out of range");
        self.alphas_bar[t]
    }
}

/// Forward process: `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn add_noise(
    x0: &Array2<f64>,
    t: usize,
    eps: &Array2<f64>,
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>> {
    if x0.dim() != eps.dim() {
        return Err(Error::shape(format!("x0 {:?} vs eps {:?}", x0.dim(), eps.dim())));
    }
    if t > schedule.t_max() {
        return Err(Error::invalid(format!(
            "timestep {t} beyond schedule length {}",
            schedule.t_max()
        )));
    }
    if t == 0 {
        return Ok(x0.clone());
    }
    let ab = schedule.alpha_bar(t);
    Ok(x0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

/// Anything that predicts the noise in `x_t` at timestep `t`.
pub trait NoisePredictor {
    fn predict(&self, x_t: &Array2<f64>, t: usize) -> Result<Array2<f64>>;
}

/// The DDIM timestep subsequence for `steps` sampling steps: `steps + 1`
/// strictly decreasing values from `t_max` down to 0.
pub fn ddim_timesteps(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_max {
        return Err(Error::invalid(format!(
            "DDIM steps {steps} must be in 1..={t_max}"
        )));
    }
    let mut times: Vec<usize> = (0..=steps)
        .rev()
        .map(|k| ((k * t_max) as f64 / steps as f64).round() as usize)
        .collect();
    times.dedup();
    Ok(times)
}

/// One deterministic (eta = 0) DDIM update from `t_from` to `t_to`.
pub fn ddim_step(
    x_t: &Array2<f64>,
    eps_hat: &Array2<f64>,
    t_from: usize,
    t_to: usize,
    schedule: &NoiseSchedule,
) -> Array2<f64> {
    let ab_from = schedule.alpha_bar(t_from);
    let ab_to = schedule.alpha_bar(t_to);
    let x0_hat = (x_t - &(eps_hat * (1.0 - ab_from).sqrt())) / ab_from.sqrt();
    &x0_hat * ab_to.sqrt() + eps_hat * (1.0 - ab_to).sqrt()
}

/// Run the DDIM trajectory from a given `x_T` down to the `x_0` estimate.
pub fn ddim_trajectory(
    model: &dyn NoisePredictor,
    x_init: Array2<f64>,
    schedule: &NoiseSchedule,
    steps: usize,
) -> Result<Array2<f64>> {
    let times = ddim_timesteps(schedule.t_max(), steps)?;
    let mut x = x_init;
    for pair in times.windows(2) {
        let (t_from, t_to) = (pair[0], pair[1]);
        let eps_hat = model.predict(&x, t_from)?;
        if eps_hat.dim() != x.dim() {
            return Err(Error::shape(format!(
                "noise prediction {:?} for state {:?}",
                eps_hat.dim(),
                x.dim()
            )));
        }
        x = ddim_step(&x, &eps_hat, t_from, t_to, schedule);
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("DDIM trajectory".into()));
    }
    Ok(x)
}

/// Sample from seeded Gaussian noise of the given shape. `tags` separate
/// independent sampling streams under one seed.
pub fn ddim_sample(
    model: &dyn NoisePredictor,
    shape: (usize, usize),
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
    tags: &[u64],
) -> Result<Array2<f64>> {
    let mut stream_tags = vec![stream::SAMPLER_INIT];
    stream_tags.extend_from_slice(tags);
    let mut rng = derive_rng(seed, &stream_tags);
    let x_init = Array2::from_shape_fn(shape, |_| rng.sample::<f64, _>(StandardNormal));
    ddim_trajectory(model, x_init, schedule, steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct FixedEps(Array2<f64>);
    impl NoisePredictor for FixedEps {
        fn predict(&self, _x_t: &Array2<f64>, _t: usize) -> Result<Array2<f64>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn schedule_worked_examples() {
        let s = NoiseSchedule::linear(1, 0.1, 0.1).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-12);

        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-12);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-12);
        assert!((s.beta(1) - 0.1).abs() < 1e-12);
        assert!((s.beta(2) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn schedule_monotonicity() {
        let s = NoiseSchedule::default_toy();
        assert_eq!(s.t_max(), 100);
        for t in 1..=s.t_max() {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1), "alpha_bar strictly decreasing");
            assert!((0.0..1.0).contains(&s.beta(t)));
            if t > 1 {
                assert!(s.beta(t) > s.beta(t - 1), "betas strictly increasing");
            }
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 0.1).is_err(), "flat multi-step");
    }

    #[test]
    fn add_noise_examples() {
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        let x0 = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 * 0.1);
        let eps = Array2::from_elem((3, 4), 0.7);

        let same = add_noise(&x0, 0, &eps, &s).unwrap();
        assert_eq!(same, x0, "t=0 is the identity");

        let zero_eps = Array2::zeros((3, 4));
        let scaled = add_noise(&x0, 2, &zero_eps, &s).unwrap();
        for (a, b) in scaled.iter().zip(x0.iter()) {
            assert!((a - b * 0.72f64.sqrt()).abs() < 1e-12);
        }

        let ones = Array2::from_elem((1, 1), 1.0);
        let x_t = add_noise(&ones, 2, &ones, &s).unwrap();
        let expect = 0.72f64.sqrt() + 0.28f64.sqrt();
        assert!((x_t[(0, 0)] - expect).abs() < 1e-12);
        assert!((x_t[(0, 0)] - 1.3777).abs() < 1e-3);

        let bad = Array2::zeros((2, 2));
        assert!(add_noise(&x0, 1, &bad, &s).is_err());
        assert!(add_noise(&x0, 3, &eps, &s).is_err());
    }

    #[test]
    fn ddim_timestep_sequences() {
        let times = ddim_timesteps(100, 40).unwrap();
        assert_eq!(times.len(), 41);
        assert_eq!(*times.first().unwrap(), 100);
        assert_eq!(*times.last().unwrap(), 0);
        for pair in times.windows(2) {
            assert!(pair[0] > pair[1], "strictly decreasing");
        }
        let full = ddim_timesteps(100, 100).unwrap();
        assert_eq!(full, (0..=100).rev().collect::<Vec<_>>());
        assert!(ddim_timesteps(100, 0).is_err());
        assert!(ddim_timesteps(100, 101).is_err());
    }

    #[test]
    fn single_step_recovers_x0_with_exact_eps() {
        let s = NoiseSchedule::default_toy();
        let mut rng = crate::rng::derive_rng(5, &[99]);
        let x0 = Array2::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0));
        let eps = Array2::from_shape_fn((4, 6), |_| rng.sample::<f64, _>(StandardNormal));
        for t in [100, 57, 3] {
            let x_t = add_noise(&x0, t, &eps, &s).unwrap();
            let back = ddim_step(&x_t, &eps, t, 0, &s);
            let err = back
                .iter()
                .zip(x0.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-5, "t={t}: single-step recovery error {err}");
        }
    }

    #[test]
    fn full_trajectory_recovers_x0_with_exact_eps() {
        let s = NoiseSchedule::default_toy();
        let mut rng = crate::rng::derive_rng(6, &[98]);
        let x0 = Array2::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0));
        let eps = Array2::from_shape_fn((4, 6), |_| rng.sample::<f64, _>(StandardNormal));
        let x_t = add_noise(&x0, s.t_max(), &eps, &s).unwrap();
        let model = FixedEps(eps);
        for steps in [s.t_max(), 40] {
            let back = ddim_trajectory(&model, x_t.clone(), &s, steps).unwrap();
            let err = back
                .iter()
                .zip(x0.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-4, "{steps}-step recovery error {err}");
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let model = FixedEps(Array2::zeros((2, 3)));
        let a = ddim_sample(&model, (2, 3), &s, 10, 77, &[1]).unwrap();
        let b = ddim_sample(&model, (2, 3), &s, 10, 77, &[1]).unwrap();
        assert_eq!(a, b, "same seed, bitwise-identical sample");
        let c = ddim_sample(&model, (2, 3), &s, 10, 78, &[1]).unwrap();
        assert_ne!(a, c, "different seed, different sample");
        let d = ddim_sample(&model, (2, 3), &s, 10, 77, &[2]).unwrap();
        assert_ne!(a, d, "different stream tag, different sample");
    }
}
