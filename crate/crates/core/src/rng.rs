//! Deterministic random streams.
//!
//! Every stream is a ChaCha8 block cipher keyed by `(seed, stream key)`. The
//! keystream is a pure function of the key and a 64-bit block counter, so two
//! streams with different keys never share state and a given `(seed, key)`
//! reproduces the same draws on every platform.
//!
//! Uniforms take the top 53 bits of each `u64` word. Standard normals use the
//! Box-Muller transform on pairs of uniforms `(u1, u2)` with `u1` in `(0, 1]`:
//! `r = sqrt(-2 ln u1)`, returning `r cos(2 pi u2)` first and caching
//! `r sin(2 pi u2)` for the next call.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Stream keys. Distinct consumers of randomness in a run draw from distinct
/// keys so that, for example, controller dithering never perturbs the plant
/// noise sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum StreamKey {
    PlantNoise = 1,
    InitialState = 2,
    ControlInput = 3,
    SystemSampling = 4,
    Auxiliary = 5,
}

#[derive(Clone, Debug)]
pub struct GaussianStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl GaussianStream {
    pub fn new(seed: u64, key: StreamKey) -> Self {
        Self::with_raw_key(seed, key as u64)
    }

    pub fn with_raw_key(seed: u64, key: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(key);
        Self { rng, spare: None }
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// `len` i.i.d. draws from `N(0, variance)`.
    pub fn normal_vec(&mut self, len: usize, variance: f64) -> Vec<f64> {
        let sd = variance.max(0.0).sqrt();
        (0..len).map(|_| sd * self.normal()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_draws() {
        let mut a = GaussianStream::new(42, StreamKey::PlantNoise);
        let mut b = GaussianStream::new(42, StreamKey::PlantNoise);
        for _ in 0..100 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }

    #[test]
    fn different_keys_differ() {
        let mut a = GaussianStream::new(42, StreamKey::PlantNoise);
        let mut b = GaussianStream::new(42, StreamKey::ControlInput);
        let same = (0..32).filter(|_| a.normal() == b.normal()).count();
        assert!(same < 2);
    }

    #[test]
    fn moments_are_standard() {
        let mut s = GaussianStream::new(7, StreamKey::Auxiliary);
        let n = 200_000;
        let draws: Vec<f64> = (0..n).map(|_| s.normal()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        // 5 standard errors
        assert!(mean.abs() < 5.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 5.0 * (2.0 / n as f64).sqrt());
    }
}
