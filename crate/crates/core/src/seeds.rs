//! Stable seed derivation.
//!
//! Every source of randomness in the pipeline draws from a seed derived as a
//! hash of the global seed plus context tags (stage name, model name, sample
//! index). Derivation is its own tiny mixer rather than `std`'s hasher so the
//! stream is stable across Rust releases and platforms.

/// SplitMix64 finalizer; bijective on u64 with good avalanche.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// FNV-1a over raw bytes, used to fold string tags into the seed chain.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives a child seed from a base seed, a stage tag and numeric context.
pub fn derive_seed(base: u64, tag: &str, parts: &[u64]) -> u64 {
    let mut h = splitmix64(base ^ fnv1a64(tag.as_bytes()));
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    h
}

/// Same as [`derive_seed`] but with an extra string in the context, e.g. a
/// model name or sample id.
pub fn derive_seed_str(base: u64, tag: &str, name: &str, parts: &[u64]) -> u64 {
    derive_seed(base ^ fnv1a64(name.as_bytes()), tag, parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_stable() {
        // Frozen values: changing them silently would invalidate every
        // recorded artifact, so the stream is pinned here.
        assert_eq!(splitmix64(0), 0xe220a8397b1dcdaf);
        assert_eq!(fnv1a64(b"epoch"), 0xfc9697d1196e6ba6);
        assert_eq!(derive_seed(42, "epoch", &[3]), derive_seed(42, "epoch", &[3]));
    }

    #[test]
    fn contexts_do_not_collide() {
        let a = derive_seed(42, "epoch", &[1]);
        let b = derive_seed(42, "epoch", &[2]);
        let c = derive_seed(42, "init", &[1]);
        let d = derive_seed_str(42, "epoch", "mini-d2", &[1]);
        assert!(a != b && a != c && a != d && b != c);
    }
}
