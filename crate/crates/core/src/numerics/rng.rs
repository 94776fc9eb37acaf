//! Seeded, splittable random streams.
//!
//! Every stream is a ChaCha8 keystream keyed by a 64-bit seed. ChaCha is a
//! counter-based generator with a fixed, portable output sequence, so a seed
//! produces the same draws on every platform. Child streams are derived by
//! hashing `(parent seed, index)` with SplitMix64, which keeps siblings
//! decorrelated and lets workers get their own stream without coordination.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream; depends only on this stream's seed and
    /// `index`, never on how many draws were already taken.
    pub fn split(&self, index: u64) -> RngStream {
        RngStream::new(splitmix64(self.seed ^ splitmix64(index.wrapping_add(1))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }

    /// Symmetric Dirichlet draw on the `count`-simplex via normalized gammas.
    pub fn dirichlet(&mut self, concentration: f64, count: usize) -> Result<Vec<f64>> {
        dirichlet_sample(concentration, count, self)
    }
}

/// Symmetric Dirichlet draw; weights are nonnegative and sum to one.
pub fn dirichlet_sample(concentration: f64, count: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::input("dirichlet needs at least one coordinate"));
    }
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(Error::input(format!(
            "dirichlet concentration must be positive, got {concentration}"
        )));
    }
    if count == 1 {
        return Ok(vec![1.0]);
    }
    let gamma = Gamma::new(concentration, 1.0).map_err(|e| Error::input(e.to_string()))?;
    let mut draws: Vec<f64> = (0..count).map(|_| gamma.sample(&mut rng.inner)).collect();
    let total: f64 = draws.iter().sum();
    if total <= 0.0 {
        // All gammas underflowed (tiny concentration): fall back to a vertex.
        let k = rng.below(count);
        draws
            .iter_mut()
            .enumerate()
            .for_each(|(i, d)| *d = if i == k { 1.0 } else { 0.0 });
        return Ok(draws);
    }
    draws.iter_mut().for_each(|d| *d /= total);
    Ok(draws)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_seeds_equal_streams() {
        let mut a = RngStream::new(42);
        let mut b = RngStream::new(42);
        let xs: Vec<u64> = (0..64).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..64).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn split_ignores_parent_position() {
        let a = RngStream::new(7);
        let mut b = RngStream::new(7);
        b.next_u64();
        assert_eq!(a.split(3).next_u64(), b.split(3).next_u64());
        assert_ne!(a.split(3).next_u64(), a.split(4).next_u64());
    }

    #[test]
    fn dirichlet_single_coordinate() {
        let mut rng = RngStream::new(1);
        assert_eq!(dirichlet_sample(1.0, 1, &mut rng).unwrap(), vec![1.0]);
        assert!(dirichlet_sample(1.0, 0, &mut rng).is_err());
    }

    #[test]
    fn dirichlet_sums_to_one() {
        let mut rng = RngStream::new(2);
        for count in 2..8 {
            let w = dirichlet_sample(1.0, count, &mut rng).unwrap();
            assert!(w.iter().all(|&x| x >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn dirichlet_uniform_mean() {
        let mut rng = RngStream::new(3);
        let mut sums = [0.0; 4];
        let draws = 10_000;
        for _ in 0..draws {
            let w = dirichlet_sample(1.0, 4, &mut rng).unwrap();
            for (s, x) in sums.iter_mut().zip(&w) {
                *s += x;
            }
        }
        for s in sums {
            assert!((s / draws as f64 - 0.25).abs() < 0.02);
        }
    }
}
