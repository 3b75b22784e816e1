//! Stable seed derivation.
//!
//! Every random stream in the crate is a ChaCha generator keyed by a 64-bit
//! seed derived from a parent seed and a purpose string, so adding a new
//! consumer never perturbs existing streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut hash: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let h = fnv1a(fnv1a(FNV_OFFSET, &seed.to_le_bytes()), purpose.as_bytes());
    mix64(h)
}

pub fn derive_indexed(seed: u64, purpose: &str, index: u64) -> u64 {
    mix64(derive_seed(seed, purpose) ^ mix64(index))
}

pub fn rng_for(seed: u64, purpose: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, purpose))
}

pub fn rng_indexed(seed: u64, purpose: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_indexed(seed, purpose, index))
}

/// Uniform value in `[-1, 1)` from a hashed lattice coordinate; used for
/// texture noise that must be a pure function of position.
pub fn hash_unit(seed: u64, a: i64, b: i64, c: i64) -> f64 {
    let mut h = mix64(seed ^ mix64(a as u64));
    h = mix64(h ^ mix64((b as u64).wrapping_add(0x1234_5678)));
    h = mix64(h ^ mix64((c as u64).wrapping_add(0x0abc_def0)));
    ((h >> 11) as f64) / ((1u64 << 53) as f64) * 2.0 - 1.0
}
