//! Deterministic random streams.
//!
//! [`RngStream`] wraps ChaCha8, a counter-based generator: the output is a
//! pure function of `(seed, stream, word position)`, so identical seeds give
//! identical draw sequences on every platform. Normal variates use the
//! Box-Muller transform on two uniforms.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::element::Element;

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// An independent stream identified by `(seed, stream)`, e.g. one per
    /// inversion batch or per epoch.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { seed, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal variate.
    pub fn normal(&mut self) -> f64 {
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = num_traits::Float::sqrt(-2.0 * num_traits::Float::ln(u1));
        r * num_traits::Float::cos(2.0 * core::f64::consts::PI * u2)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        // Multiply-shift; bias is below 2^-32 for the sizes used here.
        ((self.rng.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn fill_normal<T: Element>(&mut self, out: &mut [T], std: f64) {
        for v in out {
            *v = T::lit(self.normal() * std);
        }
    }

    /// Normal draws truncated to two standard deviations by resampling.
    pub fn fill_trunc_normal<T: Element>(&mut self, out: &mut [T], std: f64) {
        for v in out {
            let z = loop {
                let z = self.normal();
                if z.abs() <= 2.0 {
                    break z;
                }
            };
            *v = T::lit(z * std);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = RngStream::new(42);
        let mut b = RngStream::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        assert_eq!(a.counter(), 200);
    }

    #[test]
    fn derived_streams_differ() {
        let mut a = RngStream::derive(7, 0);
        let mut b = RngStream::derive(7, 1);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn normal_moments() {
        let mut r = RngStream::new(1);
        let n = 100_000;
        let xs: alloc::vec::Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn below_stays_in_range() {
        let mut r = RngStream::new(3);
        for n in 1..50 {
            assert!(r.below(n) < n);
        }
    }
}
