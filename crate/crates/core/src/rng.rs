//! Seeded random numbers.
//!
//! Everything stochastic in the crate (parameter init, scene generation,
//! shuffling, augmentation) draws from [`Rng`], a xoshiro256++ generator
//! seeded through SplitMix64. Independent streams are derived with
//! [`Rng::stream`] so that e.g. sample `i` of a dataset does not depend on how
//! many numbers sample `i - 1` consumed.

use rand_xoshiro::rand_core::{Rng as _, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng(Xoshiro256PlusPlus);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng(Xoshiro256PlusPlus::seed_from_u64(seed))
    }

    /// Generator for sub-stream `index` of `seed`.
    pub fn stream(seed: u64, index: u64) -> Self {
        Rng::new(mix64(seed ^ mix64(index.wrapping_add(0x5851_f42d_4c95_7f2d))))
    }

    /// Generator for a named sub-stream of `seed`.
    pub fn named(seed: u64, name: &str) -> Self {
        Rng::stream(seed, fnv1a(name.as_bytes()))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn uniform_f32(&mut self, lo: f32, hi: f32) -> f32 {
        self.uniform(lo as f64, hi as f64) as f32
    }

    /// Uniform integer in `[lo, hi]` (inclusive).
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        assert!(lo <= hi);
        let span = (hi - lo + 1) as u64;
        // Lemire's multiply-shift; the bias is < 2^-40 for spans used here.
        lo + ((self.next_u64() as u128 * span as u128) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.range_inclusive(0, i);
            items.swap(i, j);
        }
    }

    pub fn state(&self) -> [u8; 32] {
        self.0.state()
    }

    pub fn from_state(state: [u8; 32]) -> Self {
        Rng(Xoshiro256PlusPlus::from_seed(state))
    }
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
