use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Matrix;

/// Seeded random stream with a platform-stable algorithm. Identical seeds
/// produce identical streams everywhere.
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        SeededRng { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm(&self) -> &'static str {
        Self::ALGORITHM
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.gen_range(lo..hi)
    }

    /// Standard-normal-ish input data; Box-Muller on the uniform stream.
    pub fn normal(&mut self) -> f64 {
        let u1: f64 = self.inner.gen_range(f64::EPSILON..1.0);
        let u2: f64 = self.inner.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Matrix with entries uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
    pub fn init_matrix(&mut self, rows: usize, cols: usize, fan_in: usize) -> Matrix {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        Matrix::from_fn(rows, cols, |_, _| self.uniform(-bound, bound))
    }

    pub fn init_vector(&mut self, len: usize, fan_in: usize) -> Vec<f64> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        (0..len).map(|_| self.uniform(-bound, bound)).collect()
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.normal())
    }
}
