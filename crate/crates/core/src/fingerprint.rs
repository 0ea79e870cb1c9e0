//! Stable content hashing for dedup keys, cache keys, and config fingerprints.
//!
//! Everything here must stay byte-for-byte reproducible across runs, platforms,
//! and dependency upgrades, so we use fixed FNV-1a constants instead of
//! `std::hash` (whose output is unspecified across releases).

/// FNV-1a 64-bit hash of a byte string.
pub fn fnv1a_64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// FNV-1a 128-bit hash of a byte string.
pub fn fnv1a_128(bytes: &[u8]) -> u128 {
    const OFFSET: u128 = 0x6c62_272e_07bb_0142_62b8_2175_6295_c58d;
    const PRIME: u128 = 0x0000_0000_0100_0000_0000_0000_0000_013b;
    let mut h = OFFSET;
    for &b in bytes {
        h ^= u128::from(b);
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// Lowercase hex rendering of a 128-bit hash, used for cache keys and
/// config fingerprints.
pub fn hex128(h: u128) -> String {
    format!("{h:032x}")
}

/// Fingerprint arbitrary text (config blocks, canonical JSON) as 32 hex chars.
pub fn fingerprint(text: &str) -> String {
    hex128(fnv1a_128(text.as_bytes()))
}

/// Derive a child seed from a parent seed and a context label.
///
/// Used wherever per-group or per-source randomness must not depend on
/// iteration order: each context gets its own deterministic stream.
pub fn derive_seed(parent: u64, context: &str) -> u64 {
    let mut buf = Vec::with_capacity(8 + context.len());
    buf.extend_from_slice(&parent.to_be_bytes());
    buf.extend_from_slice(context.as_bytes());
    fnv1a_64(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv64_known_vectors() {
        // Published FNV-1a test vectors.
        assert_eq!(fnv1a_64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a_64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a_64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn fnv128_distinct_and_stable() {
        let a = fnv1a_128(b"hello");
        let b = fnv1a_128(b"hello!");
        assert_ne!(a, b);
        assert_eq!(a, fnv1a_128(b"hello"));
        assert_eq!(hex128(a).len(), 32);
    }

    #[test]
    fn derived_seeds_differ_by_context() {
        assert_ne!(derive_seed(42, "a"), derive_seed(42, "b"));
        assert_ne!(derive_seed(42, "a"), derive_seed(43, "a"));
        assert_eq!(derive_seed(42, "a"), derive_seed(42, "a"));
    }
}
