//! Seeded random streams keyed by experiment coordinates, so results do not
//! depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, stable across platforms and releases.
fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Stable 64-bit hash of `bytes`.
pub fn fingerprint(bytes: &[u8]) -> u64 {
    fnv1a(bytes, 0xcbf2_9ce4_8422_2325)
}

/// Independent generator for `(seed, parts...)`.
pub fn derive_rng(seed: u64, parts: &[&str]) -> ChaCha8Rng {
    let mut h = fnv1a(&seed.to_le_bytes(), 0xcbf2_9ce4_8422_2325);
    for p in parts {
        h = fnv1a(p.as_bytes(), h);
        h = fnv1a(&[0xff], h);
    }
    ChaCha8Rng::seed_from_u64(h)
}
