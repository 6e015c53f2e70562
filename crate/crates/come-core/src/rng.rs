//! Deterministic counter-based pseudo-random generation.
//!
//! Values are pure functions of an explicit integer key, so per-layer or
//! per-token generation can run in any order (or in parallel) and still
//! reproduce bit-identical streams for a given seed.

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes an arbitrary-length key into a single 64-bit word.
pub fn hash_key(key: &[u64]) -> u64 {
    let mut state = 0x243f_6a88_85a3_08d3u64; // arbitrary non-zero start
    for &k in key {
        state = mix(state ^ k);
    }
    mix(state)
}

/// Uniform value in `[0, 1)` derived from the key.
pub fn unit_f64(key: &[u64]) -> f64 {
    // 53 mantissa bits of the hash.
    (hash_key(key) >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
}

/// Uniform value in `(lo, hi)` (open at both ends up to rounding).
pub fn range_f64(key: &[u64], lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * unit_f64(key)
}

/// Standard normal via Box-Muller on two keyed uniforms.
pub fn normal_f64(key: &[u64]) -> f64 {
    let mut k1: Vec<u64> = key.to_vec();
    k1.push(0x5bd1);
    let mut k2: Vec<u64> = key.to_vec();
    k2.push(0xe995);
    let u1 = 1.0 - unit_f64(&k1); // (0, 1] so the log is finite
    let u2 = unit_f64(&k2);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
