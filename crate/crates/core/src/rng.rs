//! Pinned random streams.
//!
//! Realization draws must be reproducible bit-for-bit by any implementation,
//! so the generator (SplitMix64), the uniform mapping and the normal
//! transform (Box–Muller) are fixed here rather than delegated to a
//! distribution library.

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

/// Sub-stream tag XOR-ed into a realization seed to draw the initial phases.
pub const PHASE_INIT_TAG: u64 = 0x5349_4D50_4841_5345; // "SIMPHASE"

/// Deterministic 64-bit stream with pinned uniform and normal transforms.
#[derive(Debug, Clone)]
pub struct PinnedStream {
    inner: SplitMix64,
}

impl PinnedStream {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: SplitMix64::seed_from_u64(seed),
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`: `(x >> 11) · 2⁻⁵³`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Pair of independent standard normals from one Box–Muller draw.
    ///
    /// The radius uses `1 − u₁ ∈ (0, 1]` so the logarithm is always finite.
    pub fn normal_pair(&mut self) -> (f64, f64) {
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        let a = 2.0 * std::f64::consts::PI * u2;
        (r * a.cos(), r * a.sin())
    }

    /// Circular complex normal `CN(0, 1)`: `(n₁ + j n₂)/√2`.
    pub fn complex_normal(&mut self) -> (f64, f64) {
        let (a, b) = self.normal_pair();
        (a * std::f64::consts::FRAC_1_SQRT_2, b * std::f64::consts::FRAC_1_SQRT_2)
    }
}

/// Realization seeds `master_seed XOR i` for `i` in `0..n`.
pub fn expand_seeds(master_seed: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| master_seed ^ i).collect()
}
