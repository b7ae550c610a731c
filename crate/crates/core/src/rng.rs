//! Seed derivation and counter-based randomness.
//!
//! Counter-based draws are pure functions of `(seed, name, index)`, so a
//! random mask does not depend on traversal order or on how work is split
//! across threads.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the UTF-8 bytes of `s`.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Mixes a base seed with a sequence of integer labels into a new seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Uniform draw in `[0, 1)` keyed by `(seed, name, index)`.
pub fn counter_uniform(seed: u64, name: &str, index: u64) -> f64 {
    let key = splitmix64(splitmix64(seed) ^ hash_str(name));
    let bits = splitmix64(key ^ index.wrapping_mul(GOLDEN));
    // top 53 bits -> [0, 1)
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
