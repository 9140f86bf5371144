//! Voucher redemption modeling with multi-behavior graph networks.
//!
//! The pipeline runs event logs through voucher sessions into
//! user-behavior voucher graphs, pre-trains item and voucher embeddings,
//! and fits a graph-plus-attention network next to LR, DNN and DIN-style
//! baselines. A planted-signal generator supplies data with known ground
//! truth.

pub mod baselines;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod pretrain;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};

/// Seeded RNG used everywhere randomness is needed.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Deterministic RNG from a seed and a stream label.
pub fn rng_for(seed: u64, stream: u64) -> Rng {
    use rand::SeedableRng;
    let mut r = Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}
