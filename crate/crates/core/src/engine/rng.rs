use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::engine::Tensor;
use crate::Scalar;

/// Algorithm tag recorded in manifests: ChaCha8 counter-based stream keyed
/// via splitmix64 seed expansion, uniform doubles from the top 53 bits,
/// normals via the Box–Muller transform.
pub const RNG_ALGORITHM: &str = "chacha8/splitmix64 + box-muller";

/// Deterministic seeded random stream.
///
/// Identical seed ⇒ identical sample stream on every platform: ChaCha8 is a
/// fully specified counter-based generator, and all derived quantities
/// (uniform doubles, Box–Muller normals) are computed here with fixed
/// arithmetic rather than delegated to distribution crates whose internals
/// may change between versions.
#[derive(Debug, Clone)]
pub struct SeededRng {
    rng: ChaCha8Rng,
    seed: u64,
    spare_normal: Option<f64>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            spare_normal: None,
        }
    }

    /// Seed this stream was created with.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream for (seed, index) pairs; used for per-call
    /// dropout masks and per-experiment streams so concurrency never changes
    /// what any one consumer sees.
    pub fn derive(&self, index: u64) -> SeededRng {
        SeededRng::new(splitmix64(self.seed ^ splitmix64(index)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform double in [0, 1) from the top 53 bits.
    pub fn uniform_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform double in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform_f64()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        (self.uniform_f64() * n as f64) as usize % n
    }

    /// Standard normal via Box–Muller; generates in pairs, caching the spare.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] keeps ln(u1) finite.
        let u1 = 1.0 - self.uniform_f64();
        let u2 = self.uniform_f64();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        if std == 0.0 {
            return mean;
        }
        mean + std * self.standard_normal()
    }

    /// `n` Gaussian samples as a tensor. `std = 0` yields exactly `mean`.
    pub fn sample_gaussian<T: Scalar>(&mut self, n: usize, mean: f64, std: f64) -> Tensor<T> {
        Tensor::from_fn(&[n], |_| T::from_f64_lossy(self.normal(mean, std)))
    }

    /// Gaussian-filled matrix in row-major order.
    pub fn gaussian_matrix<T: Scalar>(&mut self, shape: &[usize], mean: f64, std: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::from_f64_lossy(self.normal(mean, std)))
    }
}
