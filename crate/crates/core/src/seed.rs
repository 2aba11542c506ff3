//! Seed fan-out: one user seed feeds every stage through a stage-name hash.

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finaliser.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `mix(seed ^ fnv1a(stage))`.
pub fn derive(seed: u64, stage: &str) -> u64 {
    mix(seed ^ fnv1a(stage.as_bytes()))
}

/// Seed for the `index`-th item of a stage.
pub fn derive_indexed(seed: u64, stage: &str, index: u64) -> u64 {
    mix(derive(seed, stage) ^ mix(index))
}
