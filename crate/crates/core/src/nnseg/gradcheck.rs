//! Finite-difference utilities for verifying analytic gradients, shared by
//! the layer unit tests and the repository's acceptance suite.

use crate::rng::StreamRng;

use super::tensor::Tensor4;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Central finite-difference gradient of a scalar function at `x`.
pub fn numeric_grad<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64]) -> Vec<f64> {
    let mut work = x.to_vec();
    let mut g = vec![0.0f64; x.len()];
    for i in 0..x.len() {
        let orig = work[i];
        work[i] = orig + FD_STEP;
        let hi = f(&work);
        work[i] = orig - FD_STEP;
        let lo = f(&work);
        work[i] = orig;
        g[i] = (hi - lo) / (2.0 * FD_STEP);
    }
    g
}

/// Largest elementwise relative error,
/// `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Uniform random tensor in [-1, 1], for gradient-check inputs.
pub fn random_tensor(rng: &mut StreamRng, n: usize, c: usize, h: usize, w: usize) -> Tensor4<f64> {
    let data = (0..n * c * h * w).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    Tensor4::new(n, c, h, w, data).expect("random data is finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_grad_of_quadratic() {
        // f(x) = sum x_i^2 -> grad 2x.
        let x = vec![0.5, -1.2, 3.0];
        let g = numeric_grad(|v| v.iter().map(|a| a * a).sum(), &x);
        for (gi, xi) in g.iter().zip(&x) {
            assert!((gi - 2.0 * xi).abs() < 1e-6);
        }
    }

    #[test]
    fn rel_err_uses_floor() {
        assert_eq!(max_rel_err(&[0.0], &[0.0]), 0.0);
        assert!((max_rel_err(&[1e-9], &[0.0]) - 1e-3).abs() < 1e-12);
        assert!((max_rel_err(&[2.0], &[1.0]) - 0.5).abs() < 1e-15);
    }
}
