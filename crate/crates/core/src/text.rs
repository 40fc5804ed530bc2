//! Caption text conditioning. No language model is bundled: the encoder
//! trait covers anything that maps text to token embeddings, and the
//! hash-based implementation gives a deterministic stand-in with the right
//! interface properties (token count tracks word count, distinct words get
//! distinct embeddings).

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::losses::CaptionEmbedding;
use crate::predictors::CAPTION_DIM;

/// Embedding width of text tokens fed to cross attention.
pub const TEXT_DIM: usize = 16;
/// Captions are truncated to this many tokens.
pub const MAX_TOKENS: usize = 8;

/// Maps caption text to a `[N_t x TEXT_DIM]` token matrix. An empty caption
/// yields zero tokens, which downstream treats as "no text conditioning".
pub trait TextEncoder {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Array2<f64>>;
}

/// Deterministic hash-based token embeddings: each lowercased word maps to
/// `TEXT_DIM` values in [-1, 1] derived from its SHA-256 digest.
#[derive(Debug, Clone, Default)]
pub struct HashTextEncoder;

fn word_embedding(word: &str) -> Vec<f64> {
    let mut out = Vec::with_capacity(TEXT_DIM);
    let mut counter = 0u32;
    while out.len() < TEXT_DIM {
        let mut hasher = Sha256::new();
        hasher.update(word.as_bytes());
        hasher.update(counter.to_le_bytes());
        let digest = hasher.finalize();
        for chunk in digest.chunks_exact(4) {
            if out.len() == TEXT_DIM {
                break;
            }
            let v = u32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
            // Map to [-1, 1] with full 32-bit resolution.
            out.push(v as f64 / (u32::MAX as f64 / 2.0) - 1.0);
        }
        counter += 1;
    }
    out
}

fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .collect::<String>()
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .take(MAX_TOKENS)
        .collect()
}

impl TextEncoder for HashTextEncoder {
    fn dim(&self) -> usize {
        TEXT_DIM
    }

    fn encode(&self, text: &str) -> Result<Array2<f64>> {
        let words = tokenize(text);
        let rows: Vec<Vec<f64>> = words.iter().map(|w| word_embedding(w)).collect();
        Ok(Array2::from_shape_fn((rows.len(), TEXT_DIM), |(i, j)| rows[i][j]))
    }
}

/// Pooled caption embedding in the same space as the video captioner: a
/// constant leading 1 followed by the tanh-squashed mean token embedding, so
/// the norm is at least 1 even for empty captions.
pub fn caption_embedding(text: &str) -> Result<CaptionEmbedding> {
    let encoder = HashTextEncoder;
    let tokens = encoder.encode(text)?;
    let mut v = vec![1.0];
    let n = tokens.nrows();
    for j in 0..CAPTION_DIM - 1 {
        let mean = if n == 0 {
            0.0
        } else {
            (0..n).map(|i| tokens[(i, j)]).sum::<f64>() / n as f64
        };
        v.push(mean.tanh());
    }
    CaptionEmbedding::new(v)
}
