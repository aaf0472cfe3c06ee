//! Seeded generator used for weights, proposals and synthetic data.
//!
//! Xoshiro256++ seeded through SplitMix64. The mapping from raw 64-bit draws
//! to floats and bounded integers is fixed here so frozen fixtures do not
//! depend on any distribution implementation outside this crate.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetRng(Xoshiro256PlusPlus);

impl DetRng {
    pub fn new(seed: u64) -> Self {
        Self(Xoshiro256PlusPlus::seed_from_u64(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in `[0, 1)` from the top 53 bits.
    pub fn unit_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[-a, a)`.
    pub fn symmetric(&mut self, a: f64) -> f64 {
        (2.0 * self.unit_f64() - 1.0) * a
    }

    /// Integer in `[0, n)` by multiply-shift. `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }
}
