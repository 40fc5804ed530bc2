//! End-to-end pipeline around the core model: dataset standardization,
//! two-stage training, windowed inference, and metric reports.
//!
//! Everything is driven by one declarative [`config::PipelineConfig`]; its
//! canonical hash is stamped into every artifact (checkpoints, reports) so a
//! result can always be traced back to the exact configuration that produced
//! it. All randomness flows through named streams derived from the config
//! seed, which makes every stage bitwise reproducible.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod infer;
pub mod train;

pub use facetalk_core::{Error, Result};
