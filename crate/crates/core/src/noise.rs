//! Sources of the standard-normal noise used by the reparameterization trick.
//!
//! Sampling code never talks to an RNG directly; it pulls ε values from a
//! [`NoiseSource`]. Tests swap in [`ZeroNoise`] or [`FixedNoise`] to make
//! draws deterministic.

use rand::Rng;
use rand_distr::StandardNormal;

pub trait NoiseSource {
    fn next_eps(&mut self) -> f64;
}

/// ε ~ N(0, 1) drawn from a random generator.
pub struct GaussianNoise<R>(pub R);

impl<R: Rng> NoiseSource for GaussianNoise<R> {
    fn next_eps(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }
}

impl<N: NoiseSource + ?Sized> NoiseSource for &mut N {
    fn next_eps(&mut self) -> f64 {
        (**self).next_eps()
    }
}

/// Always ε = 0, so every draw equals the posterior mean.
#[derive(Debug, Default, Clone, Copy)]
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn next_eps(&mut self) -> f64 {
        0.0
    }
}

/// Replays a fixed sequence, cycling when exhausted.
#[derive(Debug, Clone)]
pub struct FixedNoise {
    values: Vec<f64>,
    pos: usize,
}

impl FixedNoise {
    pub fn new(values: Vec<f64>) -> Self {
        assert!(!values.is_empty(), "FixedNoise needs at least one value");
        FixedNoise { values, pos: 0 }
    }
}

impl NoiseSource for FixedNoise {
    fn next_eps(&mut self) -> f64 {
        let v = self.values[self.pos % self.values.len()];
        self.pos += 1;
        v
    }
}
