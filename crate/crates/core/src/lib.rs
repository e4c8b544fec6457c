//! Probing a classifier's hidden representations for its own mistakes.
//!
//! The crate trains a classifier, records whether each prediction was a *hit*
//! or a *miss* alongside the hidden representation it came from, fits a small
//! prober on those records, and then explains the prober's *miss* verdicts by
//! walking a normalizing flow's latent space toward *hit*.

pub mod classifier;
pub mod counterfactual;
pub mod data;
pub mod error;
pub mod flow;
pub mod hitmiss;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod prober;
pub mod stats;

pub use error::{Error, Result};

use rand::SeedableRng;

/// The one generator type used for every seeded draw in the crate.
pub type SeededRng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}
