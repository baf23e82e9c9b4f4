//! Reproducible pseudo-random numbers.
//!
//! Every stochastic routine draws from [`Rng`], a thin wrapper over
//! xoshiro256++ (Blackman & Vigna). The 256-bit state is expanded from a
//! 64-bit seed with SplitMix64, so any implementation of those two published
//! algorithms reproduces the same streams:
//!
//! * `next_u64` is the raw xoshiro256++ output;
//! * `uniform` is `(next_u64 >> 11) * 2^-53`, in `[0, 1)`;
//! * `normal` uses the ziggurat sampler of `rand_distr`;
//! * `categorical` inverts the cumulative distribution with one `uniform`.

use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::rand_core::{Rng as _, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

#[derive(Clone, Debug)]
pub struct Rng(Xoshiro256PlusPlus);

impl Rng {
    pub fn seed(seed: u64) -> Self {
        Rng(Xoshiro256PlusPlus::seed_from_u64(seed))
    }

    /// Independent stream for a named sub-task, e.g. `(round, step)`.
    pub fn derive(seed: u64, stream: &[u64]) -> Self {
        let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
        for &s in stream {
            h = splitmix(h ^ s.wrapping_mul(0xBF58_476D_1CE4_E5B9));
        }
        Rng::seed(h)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Lemire's multiply-shift; bias is < n / 2^64.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.0)
    }

    /// Index drawn from unnormalized non-negative `weights`.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let u = self.uniform() * total;
        let mut acc = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        // Round-off can leave u == total; fall back to the last positive cell.
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::seed(7);
        let mut b = Rng::seed(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn derived_streams_differ() {
        let mut a = Rng::derive(1, &[0, 1]);
        let mut b = Rng::derive(1, &[1, 0]);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut r = Rng::seed(3);
        for _ in 0..10_000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn categorical_never_picks_zero_weight() {
        let mut r = Rng::seed(11);
        for _ in 0..1000 {
            let i = r.categorical(&[0.0, 0.3, 0.0, 0.7, 0.0]);
            assert!(i == 1 || i == 3);
        }
    }
}
