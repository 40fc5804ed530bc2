//! Parameter storage and the layer helpers shared by every network.
//!
//! Parameters live in a [`ParamStore`] keyed by hierarchical names
//! (`"unet.block0.spatial.wq"`). Initialization derives one RNG per parameter
//! from `sha256(seed || name)`, so creation order never affects the weights.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{Tape, Var};

/// Named `f64` matrices, ordered by name for deterministic iteration.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Array2<f64>>,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { params: BTreeMap::new(), seed }
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(name.as_bytes());
        let digest = h.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(key)
    }

    /// Get or create a parameter with Xavier-uniform init.
    pub fn xavier(&mut self, name: &str, rows: usize, cols: usize) -> Array2<f64> {
        if let Some(p) = self.params.get(name) {
            assert_eq!(p.dim(), (rows, cols), "param {name}: shape changed");
            return p.clone();
        }
        let mut rng = self.rng_for(name);
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let p = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound));
        self.params.insert(name.to_string(), p.clone());
        p
    }

    /// Get or create a parameter initialized to a constant.
    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> Array2<f64> {
        if let Some(p) = self.params.get(name) {
            assert_eq!(p.dim(), (rows, cols), "param {name}: shape changed");
            return p.clone();
        }
        let p = Array2::from_elem((rows, cols), value);
        self.params.insert(name.to_string(), p.clone());
        p
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.params.get(name)
    }

    pub fn set(&mut self, name: &str, value: Array2<f64>) {
        self.params.insert(name.to_string(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<f64>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.len()).sum()
    }
}

/// Binds a [`ParamStore`] to a [`Tape`] for one forward pass, caching the
/// `Var` for each parameter so repeated lookups share a node (and gradients
/// accumulate across uses).
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    store: &'t mut ParamStore,
    bound: BTreeMap<String, Var>,
    trainable: bool,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t Tape, store: &'t mut ParamStore) -> Self {
        Self { tape, store, bound: BTreeMap::new(), trainable: true }
    }

    /// Bind parameters as constants: forward only, no gradient tracking.
    pub fn frozen(tape: &'t Tape, store: &'t mut ParamStore) -> Self {
        Self { tape, store, bound: BTreeMap::new(), trainable: false }
    }

    fn bind(&mut self, name: &str, value: Array2<f64>) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let v = if self.trainable {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn xavier(&mut self, name: &str, rows: usize, cols: usize) -> Var {
        let value = self.store.xavier(name, rows, cols);
        self.bind(name, value)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> Var {
        let value = self.store.constant(name, rows, cols, 0.0);
        self.bind(name, value)
    }

    pub fn ones(&mut self, name: &str, rows: usize, cols: usize) -> Var {
        let value = self.store.constant(name, rows, cols, 1.0);
        self.bind(name, value)
    }

    /// Collect gradients for every bound parameter after a backward pass.
    /// Parameters that never received a gradient map to zeros.
    pub fn grads(&self, grads: &super::Grads) -> BTreeMap<String, Array2<f64>> {
        let mut out = BTreeMap::new();
        for (name, &var) in &self.bound {
            let shape = self.tape.shape(var);
            out.insert(name.clone(), grads.get_or_zeros(var, shape));
        }
        out
    }

    /// `x @ w + b` with Xavier weight and zero bias.
    pub fn linear(&mut self, prefix: &str, x: Var, d_in: usize, d_out: usize) -> Var {
        let w = self.xavier(&format!("{prefix}.w"), d_in, d_out);
        let b = self.zeros(&format!("{prefix}.b"), 1, d_out);
        let y = self.tape.matmul(x, w);
        self.tape.add_bias(y, b)
    }

    /// Linear layer whose weights and bias start at zero, so the layer's
    /// initial output is exactly zero regardless of input.
    pub fn linear_zero_init(&mut self, prefix: &str, x: Var, d_in: usize, d_out: usize) -> Var {
        let w = self.zeros(&format!("{prefix}.w"), d_in, d_out);
        let b = self.zeros(&format!("{prefix}.b"), 1, d_out);
        let y = self.tape.matmul(x, w);
        self.tape.add_bias(y, b)
    }

    /// Layer norm with learned `gamma` (ones) and `beta` (zeros).
    pub fn layer_norm(&mut self, prefix: &str, x: Var, dim: usize) -> Var {
        let gamma = self.ones(&format!("{prefix}.gamma"), 1, dim);
        let beta = self.zeros(&format!("{prefix}.beta"), 1, dim);
        self.tape.layer_norm(x, gamma, beta)
    }

    /// Two-layer MLP: `linear -> silu -> linear`.
    pub fn mlp(
        &mut self,
        prefix: &str,
        x: Var,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
    ) -> Var {
        let h = self.linear(&format!("{prefix}.fc1"), x, d_in, d_hidden);
        let h = self.tape.silu(h);
        self.linear(&format!("{prefix}.fc2"), h, d_hidden, d_out)
    }

    /// Multi-head scaled dot-product attention. `q_in` is `[n_q, d]`,
    /// `kv_in` is `[n_kv, d_kv]`; output is `[n_q, d]` after the out-projection.
    pub fn attention(
        &mut self,
        prefix: &str,
        q_in: Var,
        kv_in: Var,
        d_model: usize,
        d_kv: usize,
        n_heads: usize,
    ) -> Var {
        assert!(d_model % n_heads == 0, "attention: heads must divide model dim");
        let d_head = d_model / n_heads;
        let q = self.linear(&format!("{prefix}.wq"), q_in, d_model, d_model);
        let k = self.linear(&format!("{prefix}.wk"), kv_in, d_kv, d_model);
        let v = self.linear(&format!("{prefix}.wv"), kv_in, d_kv, d_model);
        let scale = 1.0 / (d_head as f64).sqrt();
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let (lo, hi) = (h * d_head, (h + 1) * d_head);
            let qh = self.tape.slice_cols(q, lo, hi);
            let kh = self.tape.slice_cols(k, lo, hi);
            let vh = self.tape.slice_cols(v, lo, hi);
            let kt = self.tape.transpose(kh);
            let scores = self.tape.matmul(qh, kt);
            let scores = self.tape.scale(scores, scale);
            let attn = self.tape.softmax_rows(scores);
            heads.push(self.tape.matmul(attn, vh));
        }
        let cat = if heads.len() == 1 { heads[0] } else { self.tape.concat_cols(&heads) };
        self.linear(&format!("{prefix}.wo"), cat, d_model, d_model)
    }
}

/// Sinusoidal embedding of a non-negative integer position into `[1, dim]`.
/// Even columns carry `sin(pos / 10000^(2i/dim))`, odd columns the cosine.
pub fn sinusoidal_embedding(pos: f64, dim: usize) -> Array2<f64> {
    assert!(dim % 2 == 0, "sinusoidal embedding dim must be even");
    let mut out = Array2::zeros((1, dim));
    for i in 0..dim / 2 {
        let freq = (10000f64).powf(-(2.0 * i as f64) / dim as f64);
        out[(0, 2 * i)] = (pos * freq).sin();
        out[(0, 2 * i + 1)] = (pos * freq).cos();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err};

    #[test]
    fn init_is_order_independent() {
        let mut a = ParamStore::new(7);
        let wa = a.xavier("m.w1", 4, 4);
        let wb = a.xavier("m.w2", 4, 4);

        let mut b = ParamStore::new(7);
        let wb2 = b.xavier("m.w2", 4, 4);
        let wa2 = b.xavier("m.w1", 4, 4);

        assert_eq!(wa, wa2);
        assert_eq!(wb, wb2);
        assert_ne!(wa, wb, "distinct names must get distinct draws");
    }

    #[test]
    fn init_depends_on_seed() {
        let mut a = ParamStore::new(1);
        let mut b = ParamStore::new(2);
        assert_ne!(a.xavier("w", 3, 3), b.xavier("w", 3, 3));
    }

    #[test]
    fn ctx_caches_bound_params() {
        let tape = Tape::new();
        let mut store = ParamStore::new(0);
        let mut ctx = Ctx::new(&tape, &mut store);
        let x = tape.constant(Array2::from_elem((2, 3), 1.0));
        let y1 = ctx.linear("l", x, 3, 3);
        let y2 = ctx.linear("l", x, 3, 3);
        assert_eq!(tape.value(y1), tape.value(y2));
        // Shared weights: both uses contribute to one gradient slot.
        let s1 = tape.add(y1, y2);
        let sum = tape.sum_all(s1);
        let grads = tape.backward(sum);
        let collected = ctx.grads(&grads);
        assert!(collected.contains_key("l.w"));
    }

    #[test]
    fn attention_gradcheck() {
        let tape = Tape::new();
        let mut store = ParamStore::new(3);
        // Single scalar probe: perturb one weight entry and compare the
        // analytic gradient against a central difference of the loss.
        let x0 = Array2::from_shape_fn((3, 4), |(i, j)| (i as f64 - j as f64) * 0.3);
        let kv0 = Array2::from_shape_fn((5, 6), |(i, j)| ((i * j) as f64).sin());
        let loss_of = |store: &mut ParamStore| {
            let tape = Tape::new();
            let mut ctx = Ctx::new(&tape, store);
            let x = tape.constant(x0.clone());
            let kv = tape.constant(kv0.clone());
            let y = ctx.attention("a", x, kv, 4, 6, 2);
            let sq = tape.square(y);
            tape.scalar_value(tape.sum_all(sq))
        };
        let mut ctx = Ctx::new(&tape, &mut store);
        let x = tape.constant(x0.clone());
        let kv = tape.constant(kv0.clone());
        let y = ctx.attention("a", x, kv, 4, 6, 2);
        let sq = tape.square(y);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss);
        let collected = ctx.grads(&grads);
        drop(ctx);

        for name in ["a.wq.w", "a.wk.w", "a.wv.w", "a.wo.w", "a.wo.b"] {
            let g = &collected[name];
            let base = store.get(name).unwrap().clone();
            let probe = (base.nrows() / 2, base.ncols() / 2);
            let fd = central_diff(
                |v| {
                    let mut s2 = store.clone();
                    let mut m = base.clone();
                    m[probe] = v;
                    s2.set(name, m);
                    loss_of(&mut s2)
                },
                base[probe],
                1e-5,
            );
            assert!(
                max_rel_err(g[probe], fd) < 1e-5,
                "{name} grad mismatch: analytic {}, fd {fd}",
                g[probe]
            );
        }
    }

    #[test]
    fn frozen_ctx_yields_no_grads() {
        let tape = Tape::new();
        let mut store = ParamStore::new(0);
        let mut ctx = Ctx::frozen(&tape, &mut store);
        let x = tape.leaf(Array2::from_elem((2, 3), 0.5));
        let y = ctx.linear("f", x, 3, 2);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        let collected = ctx.grads(&grads);
        assert!(collected["f.w"].iter().all(|&g| g == 0.0));
        assert!(grads.get(x).is_some(), "input still receives gradient through frozen layer");
    }

    #[test]
    fn sinusoidal_embedding_basic() {
        let e = sinusoidal_embedding(0.0, 8);
        for i in 0..4 {
            assert_eq!(e[(0, 2 * i)], 0.0);
            assert_eq!(e[(0, 2 * i + 1)], 1.0);
        }
        let e1 = sinusoidal_embedding(1.0, 8);
        assert!((e1[(0, 0)] - 1f64.sin()).abs() < 1e-12);
    }
}
