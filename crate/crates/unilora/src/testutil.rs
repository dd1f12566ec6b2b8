//! Helpers shared by in-crate unit tests. Not part of the public API.

use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Tiny splitmix64 generator so test fixtures stay stable independently of
/// any RNG crate version.
pub struct SmallRng64(u64);

impl SmallRng64 {
    pub fn new(seed: u64) -> Self {
        SmallRng64(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    /// Uniform in [-1, 1).
    pub fn next_signed(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 52) as f64 - 1.0
    }
}

pub fn seeded_matrix<S: Scalar>(rows: usize, cols: usize, rng: &mut SmallRng64) -> Matrix<S> {
    let data = (0..rows * cols)
        .map(|_| S::from_f64(rng.next_signed()))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// Central finite differences of `f` at `params`.
pub fn central_diff_grad<F: Fn(&[f64]) -> f64>(params: &[f64], h: f64, f: F) -> Vec<f64> {
    let mut grad = vec![0.0; params.len()];
    let mut work = params.to_vec();
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + h;
        let plus = f(&work);
        work[i] = orig - h;
        let minus = f(&work);
        work[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}
