//! Deterministic seed derivation for parallel simulation.
//!
//! Every slot, dataset sample and sweep realization draws its randomness from
//! an own ChaCha stream seeded by `derive_seed(base, index)`. Results are
//! therefore independent of thread count and iteration order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer, used as a counter-based seed splitter.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent stream seed from a base seed and a counter.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    splitmix64(base ^ splitmix64(index.wrapping_add(0x517c_c1b7_2722_0a95)))
}

/// ChaCha stream for the `index`-th unit of work under `base`.
pub fn stream(base: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, index))
}
