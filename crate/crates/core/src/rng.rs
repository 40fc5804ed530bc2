//! Seed derivation. Every stochastic draw in the crate flows through a
//! ChaCha stream keyed by `sha256(seed || tags...)`, so adding or reordering
//! unrelated draws never perturbs an existing one.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use sha2::{Digest, Sha256};

/// Derive an independent RNG from a base seed and a list of context tags
/// (step index, batch item, purpose code, ...).
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for t in tags {
        h.update(t.to_le_bytes());
    }
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Stable numeric tags for the independent random streams.
pub mod stream {
    pub const A2M_EPS: u64 = 1;
    pub const A2M_PRIOR: u64 = 2;
    pub const DIFFUSION_NOISE: u64 = 3;
    pub const DIFFUSION_TIMESTEP: u64 = 4;
    pub const SAMPLER_INIT: u64 = 5;
    pub const DATA_ORDER: u64 = 6;
    pub const SYNTH_DATA: u64 = 7;
}
