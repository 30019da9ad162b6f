//! Deterministic sub-seed derivation.
//!
//! Every random stage draws from a `ChaCha8Rng` seeded through [`sub_seed`], so one
//! master seed reproduces an entire run while stages stay statistically independent.

/// Derives a stage seed from `(master, stage, index)` via FNV-1a with a final
/// SplitMix64 mix. Stable across platforms and releases.
pub fn sub_seed(master: u64, stage: &str, index: u64) -> u64 {
    const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = FNV_OFFSET;
    for b in master
        .to_le_bytes()
        .iter()
        .chain(stage.as_bytes())
        .chain(index.to_le_bytes().iter())
    {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    // SplitMix64 finalizer for avalanche on the low bits.
    h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sub_seed_is_stable_and_distinct() {
        let a = sub_seed(7, "tsne", 0);
        assert_eq!(a, sub_seed(7, "tsne", 0));
        assert_ne!(a, sub_seed(7, "tsne", 1));
        assert_ne!(a, sub_seed(7, "probe", 0));
        assert_ne!(a, sub_seed(8, "tsne", 0));
        // Pinned value: derivation must never drift between releases.
        assert_eq!(sub_seed(42, "subsample", 0), 0xff5f_cb41_890b_ad94);
    }
}
