//! Deterministic derivation of independent random streams from one run seed.
//!
//! Every consumer of randomness (shuffling, dropout, noise, image pool) gets its own
//! generator keyed by `(seed, stream, counter)`, so no RNG state has to be carried
//! across iterations or stored in checkpoints beyond the counters themselves.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Named random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Shuffle = 1,
    Dropout = 2,
    Noise = 3,
    Pool = 4,
    Init = 5,
    Synthetic = 6,
}

pub fn derive_seed(seed: u64, stream: Stream, counter: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream as u64) ^ counter)
}

pub fn rng_for(seed: u64, stream: Stream, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, counter))
}
