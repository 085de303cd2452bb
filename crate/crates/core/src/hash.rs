//! Fixed, platform-independent hashing used for seeds and mock outputs.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    fnv1a_continue(FNV_OFFSET, bytes)
}

pub fn fnv1a_continue(mut h: u64, bytes: &[u8]) -> u64 {
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// FNV-1a over `seed` (little-endian) followed by `data`.
pub fn seeded(seed: u64, data: &[u8]) -> u64 {
    fnv1a_continue(fnv1a(&seed.to_le_bytes()), data)
}

/// Seed for the `index`-th item of a seeded batch.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    seeded(seed, &index.to_le_bytes())
}

/// SplitMix64 finalizer; `splitmix64(key + i * GAMMA)` is a counter-based stream.
pub fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// The `counter`-th output of the stream keyed by `key`.
pub fn counter_u64(key: u64, counter: u64) -> u64 {
    splitmix64(key.wrapping_add(counter.wrapping_add(1).wrapping_mul(GAMMA)))
}

/// Uniform in [-1, 1), built from the top 53 bits.
pub fn counter_unit_interval(key: u64, counter: u64) -> f64 {
    let bits = counter_u64(key, counter) >> 11;
    (bits as f64) * (2.0 / (1u64 << 53) as f64) - 1.0
}
