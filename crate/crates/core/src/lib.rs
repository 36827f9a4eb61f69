//! Probabilistic sentence autoencoders trained with cross-entropy (DAE),
//! KL-regularized (VAE) and MMD-regularized (WAE) objectives, plus the
//! diagnostics and metrics used to compare them.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod latent;
pub mod metrics;
pub mod objectives;
pub mod params;
pub mod persistence;
pub mod seqmodel;
pub mod train;

pub use error::{Error, Result};

/// Random stream used everywhere a draw is needed; its state is
/// checkpointable.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
