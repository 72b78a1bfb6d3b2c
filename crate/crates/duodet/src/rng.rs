//! Deterministic seed derivation.
//!
//! All randomness in the crate flows from a root seed, fanned out into
//! independent streams through a fixed 64-bit mixing function. The scheme is
//! part of the reproducibility contract: it never depends on hash-map
//! iteration order or platform hashers.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// splitmix64 finalizer; a full-avalanche 64-bit mix.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over a byte string.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derive a child seed for a named purpose and index.
pub fn child_seed(root: u64, tag: &str, index: u64) -> u64 {
    mix(root ^ mix(fnv1a(tag.as_bytes())) ^ mix(index.wrapping_mul(0xA24B_AED4_963E_E407)))
}

/// RNG for a named purpose derived from a root seed.
pub fn stream(root: u64, tag: &str, index: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(child_seed(root, tag, index))
}
