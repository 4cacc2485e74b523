//! Seeded random number generation and stage-seed derivation.
//!
//! Every source of randomness in the crate is a ChaCha8 stream seeded
//! through [`stage_seed`], a splitmix64-style mixer over
//! (master seed, stage tag, stage index). Adding or removing a stage
//! never perturbs the randomness of the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives the seed for one named stage of a run.
///
/// `stage` is a short tag ("teacher-train", "epoch-shuffle", ...) and
/// `index` disambiguates instances of the same stage (model size, epoch
/// number).
pub fn stage_seed(master: u64, stage: &str, index: u64) -> u64 {
    mix64(master ^ mix64(fnv1a(stage.as_bytes())) ^ mix64(index.wrapping_mul(0xa076_1d64_78bd_642f)))
}

/// Deterministic generator for a derived seed.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
