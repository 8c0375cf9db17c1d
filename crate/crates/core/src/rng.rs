//! Counter-based random numbers.
//!
//! Every draw is a pure function of `(seed, stream, counter)`, so corrupted
//! datasets can be regenerated in any order and in any language: the
//! construction is three rounds of the SplitMix64 finalizer.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64 random bits for `(seed, stream, counter)`.
pub fn bits(seed: u64, stream: u64, counter: u64) -> u64 {
    mix(mix(mix(seed) ^ stream) ^ counter)
}

/// Uniform on the open interval (0, 1), 53 bits of resolution.
pub fn uniform(seed: u64, stream: u64, counter: u64) -> f64 {
    ((bits(seed, stream, counter) >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

/// Standard normal via Box–Muller on counters `2·counter` and `2·counter + 1`.
pub fn normal(seed: u64, stream: u64, counter: u64) -> f64 {
    let u1 = uniform(seed, stream, 2 * counter);
    let u2 = uniform(seed, stream, 2 * counter + 1);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniform integer in `0..n`.
pub fn below(seed: u64, stream: u64, counter: u64, n: u64) -> u64 {
    ((bits(seed, stream, counter) as u128 * n as u128) >> 64) as u64
}

/// Derives a child seed from a root seed and a path of labels.
pub fn derive(root: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(root), |acc, &p| mix(acc ^ mix(p)))
}
