//! Seeded, counter-based randomness.
//!
//! [`Rng`] wraps ChaCha8, whose 64-bit stream selector gives independent
//! sequences per `(seed, stream)` pair without any shared state. A sweep
//! hands each worker its own stream; a training run derives one stream per
//! sampling purpose so that schemes which skip a draw do not shift the
//! others.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};

use crate::error::{invalid, Result};

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    /// A fresh generator on another stream of the same seed.
    pub fn derive(&self, stream: u64) -> Self {
        Self::with_stream(self.seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal_vec(&mut self, n: usize, sd: f64) -> Vec<f64> {
        (0..n).map(|_| sd * self.normal()).collect()
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// Draws an index with probability proportional to `weights`.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                return i;
            }
            u -= w;
        }
        weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
    }

    fn gamma(&mut self, shape: f64) -> f64 {
        Gamma::new(shape, 1.0)
            .expect("shape validated by caller")
            .sample(&mut self.inner)
    }
}

/// One draw from the symmetric `Beta(alpha, alpha)` law.
pub fn sample_beta(alpha: f64, rng: &mut Rng) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(invalid(format!("beta parameter must be positive, got {alpha}")));
    }
    let b = Beta::new(alpha, alpha).map_err(|e| invalid(e.to_string()))?;
    Ok(b.sample(&mut rng.inner).clamp(0.0, 1.0))
}

/// One draw from the symmetric `Dirichlet(alpha, ..., alpha)` law on `k` atoms.
pub fn sample_dirichlet(alpha: f64, k: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    if k < 2 {
        return Err(invalid(format!("dirichlet needs k >= 2, got {k}")));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(invalid(format!("dirichlet parameter must be positive, got {alpha}")));
    }
    loop {
        let mut g: Vec<f64> = (0..k).map(|_| rng.gamma(alpha)).collect();
        let total: f64 = g.iter().sum();
        // tiny alpha can underflow every gamma draw to zero
        if total > 0.0 && total.is_finite() {
            for v in &mut g {
                *v /= total;
            }
            return Ok(g);
        }
    }
}
