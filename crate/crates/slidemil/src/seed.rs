//! Deterministic seed derivation.
//!
//! All randomness in a run flows from one root seed. Each consumer
//! (split, bags, augment, init, shuffle, ...) derives its own named
//! sub-seed so stages can be re-run independently and results do not
//! depend on evaluation order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, 64 bit. Stable across platforms and Rust versions, unlike
/// `DefaultHasher`.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a named sub-seed from a root seed.
pub fn subseed(root: u64, name: &str) -> u64 {
    let mut buf = Vec::with_capacity(8 + name.len());
    buf.extend_from_slice(&root.to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    fnv1a(&buf)
}

/// Seeded generator with a platform-stable stream.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Hash of an arbitrary string, printed as 16 hex digits. Used for the
/// config hash embedded in every stage output.
pub fn hash_hex(text: &str) -> String {
    format!("{:016x}", fnv1a(text.as_bytes()))
}
