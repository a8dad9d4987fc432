//! Deterministic RNG stream derivation.
//!
//! Every source of randomness in a run derives from the root seed and a
//! stable tag path (epoch, task index, image index, ...). Parallel workers
//! therefore draw identical streams regardless of scheduling, and replaying
//! a run regenerates every draw bit-exactly.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 step; decorrelates the tag path into a fresh seed.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix(seed ^ 0x6d74335f73656564);
    for &t in tags {
        s = splitmix(s ^ t);
    }
    s
}

pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}
