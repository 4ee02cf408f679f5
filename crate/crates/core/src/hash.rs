//! FNV-1a hashing for content stamps and seed derivation.

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x00000100000001b3;

/// 64-bit FNV-1a over a byte slice.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Derives a child seed from a base seed, a role tag, and counters.
///
/// Every consumer of randomness in the pipeline gets its own stream via a
/// distinct tag, so adding a consumer never shifts the draws of another.
pub fn derive_seed(base: u64, tag: &str, counters: &[u64]) -> u64 {
    let mut bytes = Vec::with_capacity(8 + tag.len() + 8 * counters.len());
    bytes.extend_from_slice(&base.to_le_bytes());
    bytes.extend_from_slice(tag.as_bytes());
    for c in counters {
        bytes.extend_from_slice(&c.to_le_bytes());
    }
    fnv1a64(&bytes)
}
