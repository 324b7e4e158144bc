//! Seed plumbing. Every stage derives its own stream from the run seed and a
//! stage tag, so stages are reproducible independently of each other.

use rand_chacha::ChaCha8Rng;

pub use rand::Rng;
pub use rand::SeedableRng;

/// Deterministic sub-seed for a named stage (FNV-1a over the tag, mixed with
/// the base seed).
pub fn subseed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// RNG for a named stage of a run.
pub fn stage_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(subseed(seed, tag))
}

/// Per-step RNG within a stage, independent of how many draws earlier steps
/// consumed.
pub fn step_rng(seed: u64, tag: &str, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(subseed(seed, tag).wrapping_add(0x6a09_e667_f3bc_c909).wrapping_mul(step as u64 | 1).wrapping_add(step as u64))
}
