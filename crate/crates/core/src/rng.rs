//! Seeded random stream.
//!
//! xoshiro256** seeded through splitmix64, so a given seed yields the same
//! stream on every platform.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256StarStar;

use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Rng {
    inner: Xoshiro256StarStar,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    /// Independent child stream, e.g. one per dataset sample.
    pub fn fork(&mut self) -> Self {
        Self::new(self.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn coin(&mut self) -> bool {
        self.inner.random()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Normal with standard deviation `std`, resampled until it lands inside
    /// `[-2 std, 2 std]`.
    pub fn truncated_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn normal_tensor<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(self.normal() * std)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    }

    pub fn uniform_tensor<T: Scalar>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(self.uniform_range(lo, hi)))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        assert_ne!(Rng::new(1).next_u64(), Rng::new(2).next_u64());
    }

    #[test]
    fn stream_is_pinned() {
        // xoshiro256** seeded by splitmix64(0); guards against silent
        // algorithm changes in dependencies.
        let mut r = Rng::new(0);
        let first = r.next_u64();
        let again = Rng::new(0).next_u64();
        assert_eq!(first, again);
        assert_eq!(first, 0x99ec_5f36_cb75_f2b4);
    }

    #[test]
    fn truncated_normal_is_bounded() {
        let mut r = Rng::new(3);
        for _ in 0..10_000 {
            assert!(r.truncated_normal(0.02).abs() <= 0.04);
        }
    }
}
