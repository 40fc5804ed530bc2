//! Audio-driven talking-face generation at desk scale.
//!
//! The crate covers the full pipeline: multi-modal emotion embeddings from
//! audio, an audio-to-motion flow-VAE, a latent video diffusion model with
//! reference/text/audio/temporal attention, the training losses, and the
//! evaluation metric suite. All heavyweight pretrained extractors are
//! abstracted behind deterministic interfaces with synthetic stand-ins, so
//! everything here runs and trains on a laptop CPU in seconds.

pub mod a2m;
pub mod audio;
pub mod autodiff;
pub mod autoenc;
pub mod diffusion;
pub mod emotion;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod predictors;
pub mod rng;
pub mod synth;
pub mod text;
pub mod video;

pub use error::{Error, Result};
