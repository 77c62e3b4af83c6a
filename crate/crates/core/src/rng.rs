//! Seeded randomness. One RNG type everywhere so runs reproduce exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand::Rng;

/// The RNG used throughout the crate.
pub type StdRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

/// Stable FNV-1a hash, used to derive per-tensor init streams from a master
/// seed so that adding or removing parameter groups does not shift the
/// draws of unrelated tensors.
pub fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn seeded_for(master: u64, name: &str) -> StdRng {
    StdRng::seed_from_u64(master ^ fnv1a(name))
}
