//! Explicit, splittable random streams.
//!
//! A stream is identified by `(seed, counter)`: the seed keys a ChaCha8
//! generator and the counter is its position in 32-bit words. Equal
//! state always replays the same draws.
//!
//! Independent child streams come from [`RngStream::split`]: the child
//! seed is the first 64-bit word of ChaCha8 stream number `key + 1`
//! under the parent's seed (stream 0 is the parent's own sequence).

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Real;

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Rebuilds a stream positioned at `counter` words into `seed`'s sequence.
    pub fn at(seed: u64, counter: u64) -> Self {
        let mut s = Self::new(seed);
        s.inner.set_word_pos(counter as u128);
        s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u64 {
        self.inner.get_word_pos() as u64
    }

    /// Derives an independent stream keyed by `key`. Does not advance `self`.
    pub fn split(&self, key: u64) -> RngStream {
        let mut g = ChaCha8Rng::seed_from_u64(self.seed);
        g.set_stream(key.wrapping_add(1));
        RngStream::new(g.next_u64())
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        rand::Rng::random_range(&mut self.inner, 0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn fill_normal<T: Real>(&mut self, out: &mut [T]) {
        for v in out {
            *v = T::from_f64(self.normal()).unwrap();
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
