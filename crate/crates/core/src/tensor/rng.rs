//! Seeded random source shared by initialization, dropout, RReLU and shuffling.

use rand::{Rng, RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::SplitMix64;

/// Deterministic SplitMix64 stream. The same seed and the same sequence of
/// calls produce identical values on every platform.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    inner: SplitMix64,
    draws: u64,
}

impl RngState {
    pub const ALGORITHM: &'static str = "splitmix64";

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: SplitMix64::seed_from_u64(seed),
            draws: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 64-bit words consumed so far.
    pub fn position(&self) -> u64 {
        self.draws
    }

    /// Derive an independent stream, e.g. one per ensemble member or data split.
    pub fn fork(&mut self, tag: u64) -> RngState {
        let base = self.next_u64();
        RngState::new(base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.draws += 1;
        self.inner.random::<f64>()
    }

    /// Uniform in `[low, high)`.
    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.unit()
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        let z: f64 = StandardNormal.sample(self);
        mean + std * z
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.draws += 1;
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for RngState {
    fn next_u32(&mut self) -> u32 {
        self.draws += 1;
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.draws += 1;
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.draws += 1;
        self.inner.fill_bytes(dst)
    }
}
