//! Deterministic random streams.
//!
//! Every random draw in the pipeline comes from a [`Stream`] keyed by a root
//! seed, a string tag, and integer parts. Streams are independent of each
//! other and of generation order, so any entity (a note, an item's noise, a
//! batch shuffle) can be re-derived in isolation.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// splitmix64 finalizer; stable across platforms and versions.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(GOLDEN);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a seed, a tag, and integer parts into a single stream key.
pub fn mix(seed: u64, tag: &str, parts: &[u64]) -> u64 {
    let mut acc = splitmix64(seed);
    for &b in tag.as_bytes() {
        acc = splitmix64(acc ^ u64::from(b));
    }
    for &p in parts {
        acc = splitmix64(acc ^ p);
    }
    acc
}

/// A seeded ChaCha8 stream with explicit float conversions.
pub struct Stream(ChaCha8Rng);

impl Stream {
    pub fn new(seed: u64, tag: &str, parts: &[u64]) -> Self {
        Stream(ChaCha8Rng::seed_from_u64(mix(seed, tag, parts)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in [0, 1), 53-bit resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller; one fresh pair of uniforms per call.
    pub fn gaussian(&mut self) -> f64 {
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn gaussian_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.gaussian()).collect()
    }

    /// Uniform index in 0..n via rejection sampling (no modulo bias).
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0);
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Inclusive integer range.
    pub fn range_inclusive(&mut self, lo: u32, hi: u32) -> u32 {
        lo + self.index((hi - lo + 1) as usize) as u32
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.index(i + 1);
            xs.swap(i, j);
        }
    }
}
