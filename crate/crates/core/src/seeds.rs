//! Deterministic derivation of independent RNG streams from one base seed.
//!
//! Every randomized component (policy generation, rollouts, subset sampling,
//! clustering, weight init, dropout) draws from its own `ChaCha8Rng` whose
//! seed is derived from the run seed plus a tag path. Streams stay
//! independent of each other, so adding a consumer never shifts the draws
//! seen by existing ones.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Finalizer from the splitmix64 generator; a bijective mixer with good
/// avalanche behavior, so derived seeds do not correlate across tags.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a new seed by folding each tag into the base seed in order.
///
/// `derive_seed(s, &[a, b])` differs from `derive_seed(s, &[b, a])`; the
/// chain is order-sensitive by construction.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut state = splitmix64(base);
    for &tag in tags {
        state = splitmix64(state ^ splitmix64(tag));
    }
    state
}

/// A seeded generator for the stream identified by `tags` under `base`.
pub fn stream(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// Stream tags for the components that consume randomness. Fixed numbers,
/// never reused across components.
pub mod tag {
    pub const POLICY_FAMILY: u64 = 1;
    pub const BEHAVIOR_FAMILY: u64 = 2;
    pub const ROLLOUTS: u64 = 3;
    pub const OFFLINE_DATA: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const SUBSET_PLAN: u64 = 6;
    pub const CLUSTERING: u64 = 7;
    pub const MODEL_INIT: u64 = 8;
    pub const DROPOUT: u64 = 9;
}
