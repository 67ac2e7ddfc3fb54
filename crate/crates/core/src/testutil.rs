//! Shared helpers for tests and the verify suites: seeded Gaussian tensors
//! and tolerance asserts.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Standard-normal sample via Box-Muller, so the only RNG dependency is a
/// uniform source (keeps sampling identical across rand versions).
pub fn randn(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn randn_tensor(rng: &mut ChaCha8Rng, dims: &[usize], std: f64) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| randn(rng) * std).collect();
    Tensor::from_vec(dims, data).unwrap()
}

pub fn assert_close(got: f64, want: f64, tol: f64) {
    assert!(
        (got - want).abs() <= tol,
        "got {got}, want {want} (diff {}, tol {tol})",
        (got - want).abs()
    );
}

/// Max absolute elementwise deviation between two equal-shape tensors.
pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.dims(), b.dims(), "shape mismatch in max_abs_diff");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Relative Frobenius deviation `||a - b||_F / max(||b||_F, floor)`.
/// The floor keeps the metric meaningful when the reference gradient is
/// exactly zero (single-token attention rows, say).
pub fn rel_frob_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.dims(), b.dims(), "shape mismatch in rel_frob_diff");
    let num: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    num / b.frob_norm().max(1e-4)
}
