//! Deterministic, purpose-keyed random streams.
//!
//! Every random decision in the pipeline draws from a stream derived from
//! `(run seed, purpose string, index)`. Streams are independent of call
//! order and of each other, so checkpoint resume reproduces the exact
//! trajectory without serializing generator state: the step counter alone
//! identifies the stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable 64-bit FNV-1a. `std`'s default hasher is seeded per-process and
/// unstable across releases, so it cannot key reproducible streams or
/// reproducible dataset splits.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A reproducible generator for one purpose at one index (e.g. one training
/// step, one dataset item, one parameter tensor).
pub fn seeded_rng(seed: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    let mut key = Vec::with_capacity(purpose.len() + 16);
    key.extend_from_slice(&seed.to_le_bytes());
    key.extend_from_slice(purpose.as_bytes());
    key.extend_from_slice(&index.to_le_bytes());
    ChaCha8Rng::seed_from_u64(fnv1a(&key))
}
