//! Audio-to-motion: a conditional VAE whose Gaussian latent is pushed through
//! a volume-preserving normalizing flow before decoding into per-frame motion
//! latents aligned to the audio.
//!
//! The flow is a stack of (residual affine coupling, channel flip) blocks.
//! Each coupling layer mean-subtracts its log-scales, so the per-layer
//! log-determinant is exactly zero analytically — that is what licenses using
//! the closed-form Gaussian KL against the standard-normal prior even though
//! the decoder consumes the flowed latent.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::autodiff::nn::{Ctx, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::features::{AudioFeatureExtractor, AudioFeatureSequence};
use crate::rng::{derive_rng, stream};

/// Raw scale clamp applied before mean subtraction inside each coupling layer.
const SCALE_CLAMP: f64 = 20.0;
/// Floor on sigma during reparameterized sampling.
const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct A2MConfig {
    /// Latent dimension L (must be even for the coupling split).
    pub latent_dim: usize,
    /// Number of (coupling, flip) blocks.
    pub flow_depth: usize,
    /// Hidden width of each coupling conditioner.
    pub cond_hidden: usize,
    /// Hidden width of the VAE encoder/decoder MLPs.
    pub vae_hidden: usize,
    /// Audio feature dimension D_a.
    pub audio_dim: usize,
    /// Motion latent channel/height/width.
    pub motion_c: usize,
    pub motion_h: usize,
    pub motion_w: usize,
    /// Reference-image latent dimension (flattened) used as conditioning.
    pub ref_dim: usize,
    /// KL weight after annealing.
    pub kl_beta: f64,
}

impl Default for A2MConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            flow_depth: 4,
            cond_hidden: 64,
            vae_hidden: 128,
            audio_dim: 16,
            motion_c: 4,
            motion_h: 8,
            motion_w: 8,
            ref_dim: 256,
            kl_beta: 1e-2,
        }
    }
}

impl A2MConfig {
    pub fn motion_dim(&self) -> usize {
        self.motion_c * self.motion_h * self.motion_w
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.latent_dim % 2 != 0 {
            return Err(Error::invalid(format!(
                "flow latent dim must be positive and even, got {}",
                self.latent_dim
            )));
        }
        if self.flow_depth == 0 {
            return Err(Error::invalid("flow depth must be at least 1"));
        }
        Ok(())
    }
}

/// Posterior parameters, both `[1 x L]`.
#[derive(Debug, Clone)]
pub struct GaussianLatent {
    pub mu: Var,
    pub log_sigma: Var,
}

/// Flow output: transformed latent plus the numerically accumulated
/// log-determinant (zero by construction, asserted in tests).
#[derive(Debug, Clone)]
pub struct FlowState {
    pub z: Var,
    pub log_det: f64,
}

/// Per-frame motion latents `[F x (C*H*W)]` with their tensor shape.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionFrames {
    pub data: Array2<f64>,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl MotionFrames {
    pub fn new(data: Array2<f64>, c: usize, h: usize, w: usize) -> Result<Self> {
        if data.ncols() != c * h * w {
            return Err(Error::shape(format!(
                "motion frame dim {} != {c}*{h}*{w}",
                data.ncols()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("motion frames".into()));
        }
        Ok(Self { data, c, h, w })
    }

    pub fn num_frames(&self) -> usize {
        self.data.nrows()
    }
}

/// The audio-to-motion model. Parameters live in an external [`ParamStore`]
/// under the `a2m.` prefix; this struct only carries the architecture.
#[derive(Debug, Clone)]
pub struct A2M {
    pub config: A2MConfig,
}

impl A2M {
    pub fn new(config: A2MConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    /// Encoder: per-frame [motion || audio] -> MLP -> mean pool -> (mu, log_sigma).
    pub fn encode(&self, ctx: &mut Ctx, motion: Var, audio: Var) -> Result<GaussianLatent> {
        let (fm, dm) = ctx.tape.shape(motion);
        let (fa, da) = ctx.tape.shape(audio);
        if fm != fa {
            return Err(Error::shape(format!(
                "motion has {fm} frames but audio features have {fa}"
            )));
        }
        if dm != self.config.motion_dim() || da != self.config.audio_dim {
            return Err(Error::shape(format!(
                "encoder input dims ({dm}, {da}) do not match config ({}, {})",
                self.config.motion_dim(),
                self.config.audio_dim
            )));
        }
        let cat = ctx.tape.concat_cols(&[motion, audio]);
        let h = ctx.mlp("a2m.enc.frame", cat, dm + da, self.config.vae_hidden, self.config.vae_hidden);
        let pooled = ctx.tape.col_sum(h);
        let pooled = ctx.tape.scale(pooled, 1.0 / fm as f64);
        let head = ctx.linear(
            "a2m.enc.head",
            pooled,
            self.config.vae_hidden,
            2 * self.config.latent_dim,
        );
        let mu = ctx.tape.slice_cols(head, 0, self.config.latent_dim);
        let log_sigma =
            ctx.tape.slice_cols(head, self.config.latent_dim, 2 * self.config.latent_dim);
        Ok(GaussianLatent { mu, log_sigma })
    }

    /// Reparameterized sample `z = mu + max(exp(log_sigma), floor) * eps`.
    pub fn sample_latent(&self, tape: &Tape, g: &GaussianLatent, seed: u64, tags: &[u64]) -> Var {
        let l = self.config.latent_dim;
        let mut rng = derive_rng(seed, &[stream::A2M_EPS].iter().chain(tags).copied().collect::<Vec<_>>());
        let eps = Array2::from_shape_fn((1, l), |_| rng.sample::<f64, _>(StandardNormal));
        let eps = tape.constant(eps);
        let sigma = tape.exp(g.log_sigma);
        let sigma = tape.clamp(sigma, SIGMA_FLOOR, f64::INFINITY);
        let noise = tape.mul(sigma, eps);
        tape.add(g.mu, noise)
    }

    /// One coupling layer + flip. Returns the transformed latent and the
    /// numerically summed log-scales (the layer's log-determinant).
    fn coupling_block(
        &self,
        ctx: &mut Ctx,
        block: usize,
        z: Var,
        cond: Var,
        inverse: bool,
    ) -> (Var, f64) {
        let l = self.config.latent_dim;
        let half = l / 2;
        let (_, cdim) = ctx.tape.shape(cond);
        let prefix = format!("a2m.flow.block{block}");

        let transform = |ctx: &mut Ctx, z: Var| -> (Var, f64) {
            let x_a = ctx.tape.slice_cols(z, 0, half);
            let x_b = ctx.tape.slice_cols(z, half, l);
            let inp = ctx.tape.concat_cols(&[x_a, cond]);
            // Residual conditioner: hidden MLP plus a linear skip, with a
            // zero-initialized output so the flow starts as a permutation.
            let h = ctx.linear(&format!("{prefix}.fc1"), inp, half + cdim, self.config.cond_hidden);
            let h = ctx.tape.silu(h);
            let h = ctx.linear_zero_init(&format!("{prefix}.fc2"), h, self.config.cond_hidden, 2 * half);
            let skip = ctx.linear_zero_init(&format!("{prefix}.skip"), inp, half + cdim, 2 * half);
            let out = ctx.tape.add(h, skip);
            let shift = ctx.tape.slice_cols(out, 0, half);
            let raw_scale = ctx.tape.slice_cols(out, half, 2 * half);
            let clamped = ctx.tape.clamp(raw_scale, -SCALE_CLAMP, SCALE_CLAMP);
            let log_scale = ctx.tape.sub_row_mean(clamped);
            let log_det = ctx.tape.value(log_scale).sum();
            let x_b2 = if inverse {
                let neg = ctx.tape.scale(log_scale, -1.0);
                let inv_scale = ctx.tape.exp(neg);
                let moved = ctx.tape.sub(x_b, shift);
                ctx.tape.mul(moved, inv_scale)
            } else {
                let scale = ctx.tape.exp(log_scale);
                let scaled = ctx.tape.mul(x_b, scale);
                ctx.tape.add(scaled, shift)
            };
            (ctx.tape.concat_cols(&[x_a, x_b2]), if inverse { -log_det } else { log_det })
        };

        if inverse {
            // Un-flip first, then invert the coupling.
            let z = flip_channels(ctx.tape, z);
            transform(ctx, z)
        } else {
            let (z2, ld) = transform(ctx, z);
            (flip_channels(ctx.tape, z2), ld)
        }
    }

    /// Forward pass through every (coupling, flip) block.
    pub fn flow_forward(&self, ctx: &mut Ctx, z_q: Var, cond: Var) -> Result<FlowState> {
        let (r, l) = ctx.tape.shape(z_q);
        if r != 1 || l != self.config.latent_dim {
            return Err(Error::shape(format!(
                "flow input must be [1 x {}], got [{r} x {l}]",
                self.config.latent_dim
            )));
        }
        let mut z = z_q;
        let mut log_det = 0.0;
        for b in 0..self.config.flow_depth {
            let (z2, ld) = self.coupling_block(ctx, b, z, cond, false);
            z = z2;
            log_det += ld;
        }
        Ok(FlowState { z, log_det })
    }

    /// Exact algebraic inverse: blocks in reverse order, flips undone first.
    pub fn flow_inverse(&self, ctx: &mut Ctx, z_p: Var, cond: Var) -> Result<FlowState> {
        let (r, l) = ctx.tape.shape(z_p);
        if r != 1 || l != self.config.latent_dim {
            return Err(Error::shape(format!(
                "flow input must be [1 x {}], got [{r} x {l}]",
                self.config.latent_dim
            )));
        }
        let mut z = z_p;
        let mut log_det = 0.0;
        for b in (0..self.config.flow_depth).rev() {
            let (z2, ld) = self.coupling_block(ctx, b, z, cond, true);
            z = z2;
            log_det += ld;
        }
        Ok(FlowState { z, log_det })
    }

    /// Decoder: per-frame [z_p || audio_row || ref] -> MLP -> motion latents.
    pub fn decode(&self, ctx: &mut Ctx, z_p: Var, audio: Var, ref_cond: Var) -> Result<Var> {
        let (fa, da) = ctx.tape.shape(audio);
        let (_, rd) = ctx.tape.shape(ref_cond);
        if da != self.config.audio_dim || rd != self.config.ref_dim {
            return Err(Error::shape(format!(
                "decoder conditioning dims ({da}, {rd}) do not match config ({}, {})",
                self.config.audio_dim, self.config.ref_dim
            )));
        }
        let zeros = vec![0usize; fa];
        let z_tiled = ctx.tape.gather_rows(z_p, &zeros);
        let ref_tiled = ctx.tape.gather_rows(ref_cond, &zeros);
        let cat = ctx.tape.concat_cols(&[z_tiled, audio, ref_tiled]);
        let d_in = self.config.latent_dim + self.config.audio_dim + self.config.ref_dim;
        let out = ctx.mlp("a2m.dec.frame", cat, d_in, self.config.vae_hidden, self.config.motion_dim());
        Ok(out)
    }

    /// Flow conditioning vector: mean-pooled audio summary plus the flattened
    /// reference latent.
    pub fn flow_cond(&self, tape: &Tape, audio: Var, ref_cond: Var) -> Var {
        let (f, _) = tape.shape(audio);
        let pooled = tape.col_sum(audio);
        let pooled = tape.scale(pooled, 1.0 / f as f64);
        tape.concat_cols(&[pooled, ref_cond])
    }

    /// Closed-form KL(q ‖ N(0, I)) = 1/2 Σ (mu² + sigma² − 1 − 2 log sigma).
    pub fn kl_divergence(&self, tape: &Tape, g: &GaussianLatent) -> Var {
        let mu2 = tape.square(g.mu);
        let two_ls = tape.scale(g.log_sigma, 2.0);
        let var = tape.exp(two_ls);
        let sum = tape.add(mu2, var);
        let sum = tape.add_scalar(sum, -1.0);
        let sum = tape.sub(sum, two_ls);
        let total = tape.sum_all(sum);
        tape.scale(total, 0.5)
    }

    /// Sampling path used at inference: seeded prior draw -> flow -> decode.
    pub fn generate(
        &self,
        store: &mut ParamStore,
        ref_latent: &Array2<f64>,
        clip: &AudioClip,
        extractor: &dyn AudioFeatureExtractor,
        seed: u64,
    ) -> Result<MotionFrames> {
        let features = extractor.extract(clip)?;
        self.generate_from_features(store, ref_latent, &features, seed)
    }

    pub fn generate_from_features(
        &self,
        store: &mut ParamStore,
        ref_latent: &Array2<f64>,
        features: &AudioFeatureSequence,
        seed: u64,
    ) -> Result<MotionFrames> {
        if ref_latent.len() != self.config.ref_dim {
            return Err(Error::shape(format!(
                "reference latent has {} entries, config expects {}",
                ref_latent.len(),
                self.config.ref_dim
            )));
        }
        let tape = Tape::new();
        let mut ctx = Ctx::frozen(&tape, store);
        let audio = tape.constant(features.features.clone());
        let ref_flat = Array2::from_shape_vec(
            (1, self.config.ref_dim),
            ref_latent.iter().copied().collect(),
        )
        .expect("ref latent reshape");
        let ref_v = tape.constant(ref_flat);

        let mut rng = derive_rng(seed, &[stream::A2M_PRIOR]);
        let z0 = Array2::from_shape_fn((1, self.config.latent_dim), |_| {
            rng.sample::<f64, _>(StandardNormal)
        });
        let z_q = tape.constant(z0);
        let cond = self.flow_cond(&tape, audio, ref_v);
        let flow = self.flow_forward(&mut ctx, z_q, cond)?;
        let frames = self.decode(&mut ctx, flow.z, audio, ref_v)?;
        MotionFrames::new(
            tape.value(frames),
            self.config.motion_c,
            self.config.motion_h,
            self.config.motion_w,
        )
    }

    /// Training loss for one (motion, audio, ref) example on an existing tape.
    /// Returns `(loss, recon_mse, kl)` vars; caller runs backward and steps.
    pub fn train_loss(
        &self,
        ctx: &mut Ctx,
        motion: Var,
        audio: Var,
        ref_cond: Var,
        beta: f64,
        seed: u64,
        tags: &[u64],
    ) -> Result<(Var, Var, Var)> {
        let g = self.encode(ctx, motion, audio)?;
        let z_q = self.sample_latent(ctx.tape, &g, seed, tags);
        let cond = self.flow_cond(ctx.tape, audio, ref_cond);
        let flow = self.flow_forward(ctx, z_q, cond)?;
        let recon = self.decode(ctx, flow.z, audio, ref_cond)?;
        let mse = ctx.tape.mse(recon, motion);
        let kl = self.kl_divergence(ctx.tape, &g);
        let weighted = ctx.tape.scale(kl, beta);
        let loss = ctx.tape.add(mse, weighted);
        Ok((loss, mse, kl))
    }
}

/// Reverse the channel order of a `[1 x L]` latent.
fn flip_channels(tape: &Tape, z: Var) -> Var {
    let (_, l) = tape.shape(z);
    let t = tape.transpose(z);
    let rev: Vec<usize> = (0..l).rev().collect();
    let g = tape.gather_rows(t, &rev);
    tape.transpose(g)
}

/// KL annealing: ramps linearly from 0 to `beta` over the first tenth of
/// training, constant afterwards.
pub fn annealed_beta(beta: f64, step: u64, total_steps: u64) -> f64 {
    let warm = (total_steps / 10).max(1);
    if step >= warm {
        beta
    } else {
        beta * step as f64 / warm as f64
    }
}
