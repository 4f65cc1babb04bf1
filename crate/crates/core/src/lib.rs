//! Order-book driven directional trading with reinforcement learning.
//!
//! The pipeline runs in stages:
//!
//! 1. [`market_data`] parses LOBSTER level-10 order-book files (or generates
//!    synthetic books) into an [`market_data::EventStream`].
//! 2. [`ofi`] turns consecutive snapshots into per-level order-flow imbalance
//!    vectors.
//! 3. [`forecaster`] fits a dense network mapping OFI to multi-horizon mid-price
//!    returns and freezes it.
//! 4. [`env`] builds an episodic MDP whose state is the frozen forecast plus the
//!    previous action, with a spread-scaled mid-price reward.
//! 5. [`agents`] trains tabular Q-learning, PPO, GRPO and GSPO policies on it.
//! 6. [`metrics`] evaluates held-out greedy trajectories.

pub mod agents;
pub mod env;
pub mod error;
pub mod forecaster;
pub mod market_data;
pub mod metrics;
pub mod nn;
pub mod ofi;

pub use error::{Error, Result};

/// Seeded generator used everywhere randomness is needed.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate's deterministic generator from a seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}

/// Derives an independent sub-seed for a named stage.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, mixed with the base seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
