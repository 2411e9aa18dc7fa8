//! Deterministic random streams.
//!
//! Every random draw in the library comes from a ChaCha8 stream seeded by a
//! 64-bit FNV-1a hash of (base seed, purpose tag). Streams are therefore
//! independent of evaluation order: adding a parameter or reordering the
//! training loop never perturbs unrelated draws.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Derives a child seed from a base seed and a purpose tag.
pub fn stream_seed(seed: u64, tag: &str) -> u64 {
    let mut bytes = Vec::with_capacity(8 + tag.len());
    bytes.extend_from_slice(&seed.to_le_bytes());
    bytes.extend_from_slice(tag.as_bytes());
    fnv1a64(&bytes)
}

/// Deterministic random stream with the handful of distributions we need.
pub struct Stream {
    rng: ChaCha8Rng,
    /// Cached second Box-Muller variate.
    spare: Option<f64>,
}

impl Stream {
    pub fn new(seed: u64, tag: &str) -> Self {
        Stream {
            rng: ChaCha8Rng::seed_from_u64(stream_seed(seed, tag)),
            spare: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). n must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Modulo bias is negligible for the tiny ranges used here.
        (self.rng.next_u64() % n as u64) as usize
    }

    pub fn chance(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Normal(0, std) truncated to [-2 std, 2 std] by rejection.
    pub fn trunc_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }
}
