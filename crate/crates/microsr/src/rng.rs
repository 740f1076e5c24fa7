//! Seeded random number generation.
//!
//! Every stochastic step in the pipeline draws from a [`SeededRng`], a thin
//! wrapper around the ChaCha8 stream cipher. The generator is fully
//! determined by its 64-bit seed, so identical seeds produce bit-identical
//! sample streams on every platform and with any thread count.
//!
//! Parallel work never shares a generator. Instead, each task derives its own
//! child generator with [`SeededRng::split`], which mixes the parent seed and
//! a stream index through SplitMix64. Two splits with the same `(seed,
//! stream)` pair always agree, and distinct streams are statistically
//! independent.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Deterministic random generator with a documented algorithm (ChaCha8).
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Seed this generator was created with.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent child generator for parallel task `stream`.
    ///
    /// The child seed is `splitmix64(seed ^ splitmix64(stream))`, so child
    /// streams depend only on `(seed, stream)` and not on how much of the
    /// parent stream has been consumed.
    pub fn split(&self, stream: u64) -> SeededRng {
        SeededRng::new(splitmix64(self.seed ^ splitmix64(stream)))
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Fisher-Yates shuffle, deterministic given the stream position.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            items.swap(i, j);
        }
    }

    /// One Gaussian draw with the given mean and variance.
    ///
    /// `variance == 0` returns `mean` without consuming any stream state, so
    /// noise-free pipelines stay reproducible regardless of whether a
    /// generator was threaded through them.
    pub fn gaussian(&mut self, mean: f64, variance: f64) -> Result<f64> {
        if variance < 0.0 {
            return Err(Error::NegativeVariance(variance));
        }
        if variance == 0.0 {
            return Ok(mean);
        }
        let normal = Normal::new(mean, variance.sqrt())
            .map_err(|_| Error::NegativeVariance(variance))?;
        Ok(normal.sample(&mut self.inner))
    }
}

/// Length-`n` sequence of Gaussian draws; degenerate at `variance == 0`.
pub fn gaussian_samples(
    rng: &mut SeededRng,
    n: usize,
    mean: f64,
    variance: f64,
) -> Result<Vec<f64>> {
    if variance < 0.0 {
        return Err(Error::NegativeVariance(variance));
    }
    if variance == 0.0 {
        return Ok(vec![mean; n]);
    }
    let normal =
        Normal::new(mean, variance.sqrt()).map_err(|_| Error::NegativeVariance(variance))?;
    Ok((0..n).map(|_| normal.sample(&mut rng.inner)).collect())
}

/// SplitMix64 finalizer, used for seed derivation and stable name hashing.
pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Stable 64-bit FNV-1a hash of a byte string.
///
/// Used to derive one RNG stream per named weight tensor so that
/// initialization does not depend on construction order.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
