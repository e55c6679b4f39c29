//! Seeded, platform-independent random streams.
//!
//! Everything random in the crate draws from ChaCha8: the seed fixes the key
//! and a stream id separates independent consumers (init, batching, data
//! generation per example), so the draw sequence is identical everywhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Scalar, Tensor};

/// Well-known stream ids.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const BATCHES: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const FILL: u64 = 4;
    pub const EVAL_BATCHES: u64 = 5;
    pub const TIMING: u64 = 6;
    /// Data generation uses `DATA_BASE + example index`.
    pub const DATA_BASE: u64 = 1 << 32;
}

#[derive(Debug, Clone)]
pub struct RngState {
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.random_range(lo..hi)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.random_bool(p.clamp(0.0, 1.0))
    }

    pub fn normal_tensor<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(&mut self.inner)))
    }

    pub fn uniform_tensor<T: Scalar>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::from_f64_lossy(self.inner.random_range(lo..hi)))
    }

    /// Fisher–Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.inner.random_range(0..=i);
            idx.swap(i, j);
        }
        idx
    }
}
