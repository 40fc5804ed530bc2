//! The denoising network and its reference twin.
//!
//! The denoiser is a stack of transformer blocks over per-frame spatial
//! tokens, each block running four attentions in a fixed order: spatial
//! self-attention (with reference features concatenated into the key/value
//! set), audio attention (frame tokens attend to a small window of audio
//! feature rows), cross attention (tokens attend to text tokens plus one
//! projected emotion token), and temporal attention (per spatial site, tokens
//! attend across frames). Motion-context latents are embedded once at input
//! level and appear only as extra temporal key/value rows — they are never
//! block-updated, and disabling temporal attention must make them invisible
//! bitwise.
//!
//! The reference twin shares the block layout minus the sublayers that need
//! multiple frames or audio: spatial self-attention, text cross attention,
//! and the MLP. It donates its token matrix after each block, so every
//! donated map is already text-conditioned.

use ndarray::Array2;

use crate::autodiff::nn::{sinusoidal_embedding, Ctx, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};

/// Dimensions of the denoiser and its twin. Carries sizes only; which
/// conditioning paths are active is decided per call by [`CondInputs`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UNetConfig {
    pub latent_c: usize,
    pub latent_h: usize,
    pub latent_w: usize,
    /// Frames per denoised window.
    pub frames: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    /// Columns of the per-frame audio feature rows.
    pub audio_dim: usize,
    /// Audio window half-width: frame `f` attends to rows `f-r ..= f+r`
    /// (clamped), each offset slot carrying its own learned embedding.
    pub audio_radius: usize,
    pub text_dim: usize,
    pub emotion_dim: usize,
    /// Motion-context frames prepended as temporal key/value rows.
    pub motion_len: usize,
}

impl UNetConfig {
    /// Toy working size: 3 blocks of width 32 with 2 heads over 4x8x8
    /// latents, 14-frame windows, 2 motion-context frames.
    pub fn toy() -> Self {
        Self {
            latent_c: 4,
            latent_h: 8,
            latent_w: 8,
            frames: 14,
            d_model: 32,
            n_heads: 2,
            n_blocks: 3,
            audio_dim: 16,
            audio_radius: 0,
            text_dim: 16,
            emotion_dim: 27,
            motion_len: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.latent_c,
            self.latent_h,
            self.latent_w,
            self.frames,
            self.d_model,
            self.n_heads,
            self.n_blocks,
            self.audio_dim,
            self.text_dim,
            self.emotion_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::invalid("network dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "width {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Spatial token count per frame.
    pub fn sites(&self) -> usize {
        self.latent_h * self.latent_w
    }

    /// Width of one flattened latent frame row.
    pub fn latent_dim(&self) -> usize {
        self.latent_c * self.sites()
    }

    fn hidden(&self) -> usize {
        2 * self.d_model
    }
}

/// Conditioning for one denoiser call. Presence of an optional field enables
/// the corresponding attention path; `text` with zero rows removes the text
/// tokens from cross attention.
pub struct CondInputs<'a> {
    /// One donated `[sites x d_model]` map per block, already on the tape.
    pub ref_features: Vec<Var>,
    /// Text tokens `[n_tokens x text_dim]`; zero rows allowed.
    pub text: &'a Array2<f64>,
    /// Emotion embedding `[1 x emotion_dim]`; projected to one cross token.
    pub emotion: Option<&'a Array2<f64>>,
    /// Frame-aligned audio features `[>= frames x audio_dim]`.
    pub audio: Option<&'a Array2<f64>>,
    /// Motion-context latents `[motion_len x latent_dim]`.
    pub motion: Option<&'a Array2<f64>>,
    /// Temporal attention switch; off is for isolation tests only.
    pub temporal: bool,
}

/// Sinusoidal frame-position rows: row `f*sites + s` holds the embedding of
/// frame index `first + f`, identical across sites.
fn frame_position_rows(n_frames: usize, first: usize, sites: usize, dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((n_frames * sites, dim));
    for f in 0..n_frames {
        let row = sinusoidal_embedding((first + f) as f64, dim);
        for s in 0..sites {
            for j in 0..dim {
                out[(f * sites + s, j)] = row[(0, j)];
            }
        }
    }
    out
}

/// Flattened latent rows -> embedded token matrix `[n_frames*sites x d_model]`:
/// per-site channel projection plus a learned spatial position embedding and,
/// when `frame_pos_start` is given, a sinusoidal frame position.
fn embed_tokens(
    ctx: &mut Ctx,
    cfg: &UNetConfig,
    prefix: &str,
    latents: Var,
    n_frames: usize,
    frame_pos_start: Option<usize>,
) -> Var {
    let tape = ctx.tape;
    let sites = cfg.sites();
    let toks = tape.reshape(latents, n_frames * sites, cfg.latent_c);
    let mut x = ctx.linear(&format!("{prefix}.token_proj"), toks, cfg.latent_c, cfg.d_model);
    let pos = ctx.xavier(&format!("{prefix}.pos_spatial"), sites, cfg.d_model);
    let tiled = if n_frames == 1 { pos } else { tape.concat_rows(&vec![pos; n_frames]) };
    x = tape.add(x, tiled);
    if let Some(first) = frame_pos_start {
        let fp = tape.constant(frame_position_rows(n_frames, first, sites, cfg.d_model));
        x = tape.add(x, fp);
    }
    x
}

/// Encode a reference latent under the given text, returning one donated
/// feature map per block (each `[sites x d_model]`, on the tape).
pub fn referencenet_forward(
    ctx: &mut Ctx,
    cfg: &UNetConfig,
    ref_latent: &Array2<f64>,
    text: &Array2<f64>,
) -> Result<Vec<Var>> {
    cfg.validate()?;
    if ref_latent.dim() != (1, cfg.latent_dim()) {
        return Err(Error::shape(format!(
            "reference latent {:?}, expected (1, {})",
            ref_latent.dim(),
            cfg.latent_dim()
        )));
    }
    if text.nrows() > 0 && text.ncols() != cfg.text_dim {
        return Err(Error::shape(format!(
            "text tokens {:?}, expected width {}",
            text.dim(),
            cfg.text_dim
        )));
    }
    let tape = ctx.tape;
    let rl = tape.constant(ref_latent.clone());
    let mut x = embed_tokens(ctx, cfg, "refnet", rl, 1, None);
    let text_kv = (text.nrows() > 0).then(|| tape.constant(text.clone()));
    let mut feats = Vec::with_capacity(cfg.n_blocks);
    for b in 0..cfg.n_blocks {
        let p = format!("refnet.block{b}");
        let xn = ctx.layer_norm(&format!("{p}.ln_spatial"), x, cfg.d_model);
        let at = ctx.attention(&format!("{p}.spatial"), xn, xn, cfg.d_model, cfg.d_model, cfg.n_heads);
        x = tape.add(x, at);
        if let Some(tk) = text_kv {
            let xn = ctx.layer_norm(&format!("{p}.ln_cross"), x, cfg.d_model);
            let at = ctx.attention(&format!("{p}.cross"), xn, tk, cfg.d_model, cfg.text_dim, cfg.n_heads);
            x = tape.add(x, at);
        }
        let xn = ctx.layer_norm(&format!("{p}.ln_mlp"), x, cfg.d_model);
        let m = ctx.mlp(&format!("{p}.mlp"), xn, cfg.d_model, cfg.hidden(), cfg.d_model);
        x = tape.add(x, m);
        feats.push(x);
    }
    Ok(feats)
}

/// Convenience for inference: run the frozen twin once and return the donated
/// maps as plain arrays, reusable across every sampler step.
pub fn ref_feature_arrays(
    store: &ParamStore,
    cfg: &UNetConfig,
    ref_latent: &Array2<f64>,
    text: &Array2<f64>,
) -> Result<Vec<Array2<f64>>> {
    let tape = Tape::new();
    let mut store = store.clone();
    let mut ctx = Ctx::frozen(&tape, &mut store);
    let feats = referencenet_forward(&mut ctx, cfg, ref_latent, text)?;
    Ok(feats.into_iter().map(|v| tape.value(v)).collect())
}

/// Predict the noise in `x_t` (`[frames x latent_dim]`) at timestep `t` under
/// the given conditioning. Output shape equals input shape.
pub fn unet_forward(
    ctx: &mut Ctx,
    cfg: &UNetConfig,
    x_t: Var,
    t: usize,
    cond: &CondInputs,
) -> Result<Var> {
    cfg.validate()?;
    let tape = ctx.tape;
    let (frames, sites, d) = (cfg.frames, cfg.sites(), cfg.d_model);
    if tape.shape(x_t) != (frames, cfg.latent_dim()) {
        return Err(Error::shape(format!(
            "denoiser input {:?}, expected ({frames}, {})",
            tape.shape(x_t),
            cfg.latent_dim()
        )));
    }
    if cond.ref_features.len() != cfg.n_blocks {
        return Err(Error::invalid(format!(
            "{} reference maps for {} blocks",
            cond.ref_features.len(),
            cfg.n_blocks
        )));
    }
    for (b, &rf) in cond.ref_features.iter().enumerate() {
        if tape.shape(rf) != (sites, d) {
            return Err(Error::shape(format!(
                "block {b}: reference feature {:?}, expected ({sites}, {d})",
                tape.shape(rf)
            )));
        }
    }
    if cond.text.nrows() > 0 && cond.text.ncols() != cfg.text_dim {
        return Err(Error::shape(format!(
            "text tokens {:?}, expected width {}",
            cond.text.dim(),
            cfg.text_dim
        )));
    }
    if let Some(e) = cond.emotion {
        if e.dim() != (1, cfg.emotion_dim) {
            return Err(Error::shape(format!(
                "emotion embedding {:?}, expected (1, {})",
                e.dim(),
                cfg.emotion_dim
            )));
        }
    }
    if let Some(a) = cond.audio {
        if a.nrows() < frames || a.ncols() != cfg.audio_dim {
            return Err(Error::shape(format!(
                "audio features {:?}, expected (>= {frames}, {})",
                a.dim(),
                cfg.audio_dim
            )));
        }
    }
    if let Some(m) = cond.motion {
        if m.dim() != (cfg.motion_len, cfg.latent_dim()) {
            return Err(Error::shape(format!(
                "motion context {:?}, expected ({}, {})",
                m.dim(),
                cfg.motion_len,
                cfg.latent_dim()
            )));
        }
    }

    // Target-frame positions start at motion_len so that enabling the motion
    // context only adds key/value rows without renumbering the queries.
    let mut x = embed_tokens(ctx, cfg, "unet", x_t, frames, Some(cfg.motion_len));
    let temb = tape.constant(sinusoidal_embedding(t as f64, d));
    let temb = ctx.mlp("unet.time_mlp", temb, d, cfg.hidden(), d);
    x = tape.add_bias(x, temb);

    // Per-frame audio key/value windows, built once and shared by all blocks.
    // Offset-slot embeddings break permutation symmetry between the rows.
    let audio_kvs: Option<Vec<Var>> = match cond.audio {
        Some(a) => {
            let n_rows = a.nrows() as i64;
            let r = cfg.audio_radius as i64;
            let ac = tape.constant(a.clone());
            let slots =
                ctx.xavier("unet.audio_slots", 2 * cfg.audio_radius + 1, cfg.audio_dim);
            let mut kvs = Vec::with_capacity(frames);
            for f in 0..frames {
                let idx: Vec<usize> = (-r..=r)
                    .map(|o| (f as i64 + o).clamp(0, n_rows - 1) as usize)
                    .collect();
                let rows = tape.gather_rows(ac, &idx);
                kvs.push(tape.add(rows, slots));
            }
            Some(kvs)
        }
        None => None,
    };

    // Cross-attention key/values: text tokens plus one projected emotion
    // token. Skipped entirely when both are absent.
    let cross_kv: Option<Var> = {
        let text_kv = (cond.text.nrows() > 0).then(|| tape.constant(cond.text.clone()));
        let emo_kv = cond.emotion.map(|e| {
            let ec = tape.constant(e.clone());
            ctx.linear("unet.emo_proj", ec, cfg.emotion_dim, cfg.text_dim)
        });
        match (text_kv, emo_kv) {
            (Some(t), Some(e)) => Some(tape.concat_rows(&[t, e])),
            (Some(t), None) => Some(t),
            (None, Some(e)) => Some(e),
            (None, None) => None,
        }
    };

    // Motion context, embedded once at input level (frame positions 0..M).
    // Only temporal attention ever reads these rows.
    let motion_tokens: Option<Var> = match (cond.temporal, cond.motion) {
        (true, Some(m)) => {
            let mc = tape.constant(m.clone());
            Some(embed_tokens(ctx, cfg, "unet", mc, cfg.motion_len, Some(0)))
        }
        _ => None,
    };

    for b in 0..cfg.n_blocks {
        x = unet_block(
            ctx,
            cfg,
            b,
            x,
            cond.ref_features[b],
            audio_kvs.as_deref(),
            cross_kv,
            motion_tokens,
            cond.temporal,
        );
    }

    let xn = ctx.layer_norm("unet.ln_out", x, d);
    let out = ctx.linear_zero_init("unet.head", xn, d, cfg.latent_c);
    Ok(tape.reshape(out, frames, cfg.latent_dim()))
}

#[allow(clippy::too_many_arguments)]
fn unet_block(
    ctx: &mut Ctx,
    cfg: &UNetConfig,
    b: usize,
    x_in: Var,
    ref_feat: Var,
    audio_kvs: Option<&[Var]>,
    cross_kv: Option<Var>,
    motion_tokens: Option<Var>,
    temporal: bool,
) -> Var {
    let tape = ctx.tape;
    let (frames, sites, d) = (cfg.frames, cfg.sites(), cfg.d_model);
    let p = format!("unet.block{b}");
    let mut x = x_in;

    // Spatial: each frame's tokens attend to themselves plus the donated
    // reference map; attention weights are shared across frames.
    let xn = ctx.layer_norm(&format!("{p}.ln_spatial"), x, d);
    let mut outs = Vec::with_capacity(frames);
    for f in 0..frames {
        let q = tape.slice_rows(xn, f * sites, (f + 1) * sites);
        let kv = tape.concat_rows(&[q, ref_feat]);
        outs.push(ctx.attention(&format!("{p}.spatial"), q, kv, d, d, cfg.n_heads));
    }
    let sp = tape.concat_rows(&outs);
    x = tape.add(x, sp);

    // Audio: each frame's tokens attend to that frame's audio window.
    if let Some(kvs) = audio_kvs {
        let xn = ctx.layer_norm(&format!("{p}.ln_audio"), x, d);
        let mut outs = Vec::with_capacity(frames);
        for f in 0..frames {
            let q = tape.slice_rows(xn, f * sites, (f + 1) * sites);
            outs.push(ctx.attention(&format!("{p}.audio"), q, kvs[f], d, cfg.audio_dim, cfg.n_heads));
        }
        let au = tape.concat_rows(&outs);
        x = tape.add(x, au);
    }

    // Cross: all tokens attend to the shared text/emotion rows at once.
    if let Some(kv) = cross_kv {
        let xn = ctx.layer_norm(&format!("{p}.ln_cross"), x, d);
        let at = ctx.attention(&format!("{p}.cross"), xn, kv, d, cfg.text_dim, cfg.n_heads);
        x = tape.add(x, at);
    }

    // Temporal: per spatial site, tokens attend across frames, with the
    // motion-context rows prepended to the key/value set.
    if temporal {
        let xn = ctx.layer_norm(&format!("{p}.ln_temporal"), x, d);
        let mut outs = Vec::with_capacity(sites);
        for s in 0..sites {
            let idx: Vec<usize> = (0..frames).map(|f| f * sites + s).collect();
            let q = tape.gather_rows(xn, &idx);
            let kv = match motion_tokens {
                Some(m) => {
                    let midx: Vec<usize> =
                        (0..cfg.motion_len).map(|k| k * sites + s).collect();
                    let mrows = tape.gather_rows(m, &midx);
                    tape.concat_rows(&[mrows, q])
                }
                None => q,
            };
            outs.push(ctx.attention(&format!("{p}.temporal"), q, kv, d, d, cfg.n_heads));
        }
        // Per-site outputs come back site-major; scatter to frame-major.
        let cat = tape.concat_rows(&outs);
        let mut back = vec![0usize; frames * sites];
        for (f, row) in back.chunks_mut(sites).enumerate() {
            for (s, slot) in row.iter_mut().enumerate() {
                *slot = s * frames + f;
            }
        }
        let tp = tape.gather_rows(cat, &back);
        x = tape.add(x, tp);
    }

    let xn = ctx.layer_norm(&format!("{p}.ln_mlp"), x, d);
    let m = ctx.mlp(&format!("{p}.mlp"), xn, d, cfg.hidden(), d);
    tape.add(x, m)
}

/// A frozen denoiser plus fixed conditioning, packaged as a [`NoisePredictor`]
/// for the sampler. Reference maps are precomputed so each step pays one
/// denoiser forward only.
pub struct EpsModel<'a> {
    pub cfg: &'a UNetConfig,
    pub store: &'a ParamStore,
    pub ref_features: Vec<Array2<f64>>,
    pub text: Array2<f64>,
    pub emotion: Option<Array2<f64>>,
    pub audio: Option<Array2<f64>>,
    pub motion: Option<Array2<f64>>,
    pub temporal: bool,
}

impl NoisePredictor for EpsModel<'_> {
    fn predict(&self, x_t: &Array2<f64>, t: usize) -> Result<Array2<f64>> {
        let tape = Tape::new();
        let mut store = self.store.clone();
        let mut ctx = Ctx::frozen(&tape, &mut store);
        let x = tape.constant(x_t.clone());
        let refs = self.ref_features.iter().map(|a| tape.constant(a.clone())).collect();
        let cond = CondInputs {
            ref_features: refs,
            text: &self.text,
            emotion: self.emotion.as_ref(),
            audio: self.audio.as_ref(),
            motion: self.motion.as_ref(),
            temporal: self.temporal,
        };
        let out = unet_forward(&mut ctx, self.cfg, x, t, &cond)?;
        Ok(tape.value(out))
    }
}
