//! Frozen toy autoencoder between pixel frames and diffusion latents.
//!
//! Each 4x4 pixel patch (48 values across RGB) is projected onto its top
//! principal components, whitened so latent channels have roughly unit
//! variance over the fitting set. The fit is closed-form (eigendecomposition
//! of the patch covariance), deterministic, and frozen afterwards; encode and
//! decode are affine maps, exposed both as plain array ops and as tape
//! constants for gradient flow through decoded frames.

use nalgebra::DMatrix;
use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::video::VideoTensor;

/// Pixel patch edge length.
pub const PATCH: usize = 4;
/// Latent channels per patch site.
pub const LATENT_C: usize = 8;
/// Variance floor added before whitening.
const WHITEN_EPS: f64 = 1e-6;

/// Frozen patch autoencoder for `c x h x w` frames (`c` = 3, `h`, `w`
/// divisible by [`PATCH`]). Latents are `[LATENT_C x h/PATCH x w/PATCH]`
/// per frame, flattened site-major: the `LATENT_C` channels of each patch
/// site sit contiguously, so a latent row reshapes directly into
/// `[sites x LATENT_C]` spatial tokens.
#[derive(Debug, Clone)]
pub struct PatchAutoencoder {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    /// Patch mean, `[1 x c*PATCH*PATCH]`.
    mean: Array2<f64>,
    /// Principal directions, `[c*PATCH*PATCH x LATENT_C]`, orthonormal columns.
    basis: Array2<f64>,
    /// Per-component whitening scales, `[1 x LATENT_C]`.
    scales: Array2<f64>,
    /// Dense affine encode/decode over whole frames, prebuilt from the fit.
    enc_w: Array2<f64>,
    enc_b: Array2<f64>,
    dec_w: Array2<f64>,
    dec_b: Array2<f64>,
}

impl PatchAutoencoder {
    /// Fit on the frames of one or more videos. All videos must share the
    /// autoencoder's frame geometry.
    pub fn fit(videos: &[VideoTensor], c: usize, h: usize, w: usize) -> Result<Self> {
        check_geometry(c, h, w)?;
        let pd = c * PATCH * PATCH;
        let mut patches: Vec<Vec<f64>> = Vec::new();
        for v in videos {
            if (v.c, v.h, v.w) != (c, h, w) {
                return Err(Error::shape(format!(
                    "video is {}x{}x{}, autoencoder expects {c}x{h}x{w}",
                    v.c, v.h, v.w
                )));
            }
            for f in 0..v.num_frames() {
                for gy in 0..h / PATCH {
                    for gx in 0..w / PATCH {
                        let mut p = vec![0.0; pd];
                        for ch in 0..c {
                            for py in 0..PATCH {
                                for px in 0..PATCH {
                                    p[ch * PATCH * PATCH + py * PATCH + px] =
                                        v.pixel(f, ch, gy * PATCH + py, gx * PATCH + px);
                                }
                            }
                        }
                        patches.push(p);
                    }
                }
            }
        }
        if patches.len() < LATENT_C {
            return Err(Error::invalid(format!(
                "autoencoder fit needs at least {LATENT_C} patches, got {}",
                patches.len()
            )));
        }

        let n = patches.len() as f64;
        let mut mean = vec![0.0; pd];
        for p in &patches {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut cov = DMatrix::zeros(pd, pd);
        for p in &patches {
            for i in 0..pd {
                let di = p[i] - mean[i];
                for j in i..pd {
                    cov[(i, j)] += di * (p[j] - mean[j]);
                }
            }
        }
        for i in 0..pd {
            for j in i..pd {
                let v: f64 = cov[(i, j)] / n;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }

        let eig = cov.symmetric_eigen();
        // Sort components by eigenvalue, largest first; index tie-break keeps
        // the fit bitwise deterministic.
        let mut order: Vec<usize> = (0..pd).collect();
        order.sort_by(|&a, &b| {
            let (va, vb): (f64, f64) = (eig.eigenvalues[a], eig.eigenvalues[b]);
            vb.partial_cmp(&va).expect("finite eigenvalues").then(a.cmp(&b))
        });
        let mut basis = Array2::zeros((pd, LATENT_C));
        let mut scales = Array2::zeros((1, LATENT_C));
        for k in 0..LATENT_C {
            let idx = order[k];
            let col = eig.eigenvectors.column(idx);
            // Fix the sign so the largest-magnitude entry is positive.
            let mut pivot = 0;
            for i in 1..pd {
                if col[i].abs() > col[pivot].abs() {
                    pivot = i;
                }
            }
            let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
            for i in 0..pd {
                basis[(i, k)] = sign * col[i];
            }
            scales[(0, k)] = (eig.eigenvalues[idx].max(0.0) + WHITEN_EPS).sqrt();
        }
        let mean = Array2::from_shape_fn((1, pd), |(_, j)| mean[j]);
        Self::from_params(c, h, w, mean, basis, scales)
    }

    /// Rebuild from stored parameters (checkpoint load).
    pub fn from_params(
        c: usize,
        h: usize,
        w: usize,
        mean: Array2<f64>,
        basis: Array2<f64>,
        scales: Array2<f64>,
    ) -> Result<Self> {
        check_geometry(c, h, w)?;
        let pd = c * PATCH * PATCH;
        if mean.dim() != (1, pd) || basis.dim() != (pd, LATENT_C) || scales.dim() != (1, LATENT_C)
        {
            return Err(Error::shape(format!(
                "autoencoder params {:?}/{:?}/{:?} for patch dim {pd}",
                mean.dim(),
                basis.dim(),
                scales.dim()
            )));
        }
        if scales.iter().any(|s| *s <= 0.0 || !s.is_finite()) {
            return Err(Error::invalid("autoencoder scales must be positive"));
        }
        let (hp, wp) = (h / PATCH, w / PATCH);
        let n_pix = c * h * w;
        let n_lat = LATENT_C * hp * wp;
        let mut enc_w = Array2::zeros((n_pix, n_lat));
        let mut dec_w = Array2::zeros((n_lat, n_pix));
        let mut enc_b = Array2::zeros((1, n_lat));
        let mut dec_b = Array2::zeros((1, n_pix));
        for gy in 0..hp {
            for gx in 0..wp {
                for k in 0..LATENT_C {
                    let lat = (gy * wp + gx) * LATENT_C + k;
                    let mut bias = 0.0;
                    for ch in 0..c {
                        for py in 0..PATCH {
                            for px in 0..PATCH {
                                let p_idx = ch * PATCH * PATCH + py * PATCH + px;
                                let pix =
                                    ch * h * w + (gy * PATCH + py) * w + (gx * PATCH + px);
                                let u = basis[(p_idx, k)];
                                enc_w[(pix, lat)] = u / scales[(0, k)];
                                dec_w[(lat, pix)] = u * scales[(0, k)];
                                bias += mean[(0, p_idx)] * u / scales[(0, k)];
                                if k == 0 {
                                    dec_b[(0, pix)] = mean[(0, p_idx)];
                                }
                            }
                        }
                    }
                    enc_b[(0, lat)] = -bias;
                }
            }
        }
        Ok(Self { c, h, w, mean, basis, scales, enc_w, enc_b, dec_w, dec_b })
    }

    pub fn params(&self) -> [(&'static str, &Array2<f64>); 3] {
        [
            ("autoenc.mean", &self.mean),
            ("autoenc.basis", &self.basis),
            ("autoenc.scales", &self.scales),
        ]
    }

    /// Latent width per frame row.
    pub fn latent_dim(&self) -> usize {
        LATENT_C * (self.h / PATCH) * (self.w / PATCH)
    }

    pub fn latent_hw(&self) -> (usize, usize) {
        (self.h / PATCH, self.w / PATCH)
    }

    /// Encode `[F x c*h*w]` pixel rows to `[F x latent_dim]` latent rows.
    pub fn encode_frames(&self, frames: &Array2<f64>) -> Result<Array2<f64>> {
        if frames.ncols() != self.c * self.h * self.w {
            return Err(Error::shape(format!(
                "frames have {} columns, expected {}",
                frames.ncols(),
                self.c * self.h * self.w
            )));
        }
        Ok(frames.dot(&self.enc_w) + &self.enc_b)
    }

    /// Decode `[F x latent_dim]` latent rows back to pixel rows.
    pub fn decode_frames(&self, latents: &Array2<f64>) -> Result<Array2<f64>> {
        if latents.ncols() != self.latent_dim() {
            return Err(Error::shape(format!(
                "latents have {} columns, expected {}",
                latents.ncols(),
                self.latent_dim()
            )));
        }
        Ok(latents.dot(&self.dec_w) + &self.dec_b)
    }

    pub fn encode_video(&self, video: &VideoTensor) -> Result<Array2<f64>> {
        if (video.c, video.h, video.w) != (self.c, self.h, self.w) {
            return Err(Error::shape(format!(
                "video is {}x{}x{}, autoencoder expects {}x{}x{}",
                video.c, video.h, video.w, self.c, self.h, self.w
            )));
        }
        self.encode_frames(&video.data)
    }

    pub fn decode_to_video(&self, latents: &Array2<f64>) -> Result<VideoTensor> {
        VideoTensor::new(self.decode_frames(latents)?, self.c, self.h, self.w)
    }

    /// Tape-side decode for losses on decoded frames.
    pub fn decode_t(&self, tape: &Tape, latents: Var) -> Var {
        let w = tape.constant(self.dec_w.clone());
        let b = tape.constant(self.dec_b.clone());
        let x = tape.matmul(latents, w);
        tape.add_bias(x, b)
    }

    /// Tape-side encode (used in tests; training encodes targets off-tape).
    pub fn encode_t(&self, tape: &Tape, frames: Var) -> Var {
        let w = tape.constant(self.enc_w.clone());
        let b = tape.constant(self.enc_b.clone());
        let z = tape.matmul(frames, w);
        tape.add_bias(z, b)
    }

    /// SHA-256 over the fitted parameters (float32 little-endian), for the
    /// freeze contract.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (_, arr) in self.params() {
            for v in arr.iter() {
                hasher.update((*v as f32).to_le_bytes());
            }
        }
        hex(&hasher.finalize())
    }
}

fn check_geometry(c: usize, h: usize, w: usize) -> Result<()> {
    if c == 0 || h == 0 || w == 0 || h % PATCH != 0 || w % PATCH != 0 {
        return Err(Error::invalid(format!(
            "frame geometry {c}x{h}x{w} must have positive dims divisible by {PATCH}"
        )));
    }
    Ok(())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
