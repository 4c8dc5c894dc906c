//! Adam on a flat parameter vector, with bias-corrected first and second
//! moments, plus the geometric learning-rate decay used during training.

use crate::error::{Error, Result};
use crate::scalar::Real;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Running first/second moment estimates and the step counter.
#[derive(Debug, Clone)]
pub struct AdamState<T: Real> {
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(n_params: usize) -> AdamState<T> {
        AdamState { m: vec![T::zero(); n_params], v: vec![T::zero(); n_params], t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

/// One in-place Adam update of `params` from `grads`.
pub fn adam_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::DimMismatch(format!(
            "params {}, grads {}, state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let b1 = T::of(beta1);
    let b2 = T::of(beta2);
    let corr1 = T::of(1.0 - beta1.powi(state.t as i32));
    let corr2 = T::of(1.0 - beta2.powi(state.t as i32));
    let lr_t = T::of(lr);
    let eps_t = T::of(eps);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (T::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::one() - b2) * g * g;
        let m_hat = state.m[i] / corr1;
        let v_hat = state.v[i] / corr2;
        params[i] = params[i] - lr_t * m_hat / (v_hat.sqrt() + eps_t);
    }
    Ok(())
}

/// Learning rate for a given epoch: log-linear from `lr_start` at epoch 0
/// to `lr_end` at `decay_epochs`, constant at `lr_end` afterwards.
pub fn lr_schedule(epoch: usize, lr_start: f64, lr_end: f64, decay_epochs: usize) -> f64 {
    assert!(lr_start > 0.0 && lr_end > 0.0 && decay_epochs > 0);
    let frac = (epoch.min(decay_epochs) as f64) / decay_epochs as f64;
    10f64.powf(lr_start.log10() + frac * (lr_end.log10() - lr_start.log10()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = vec![1.5f64, -2.0, 0.25];
        let mut st = AdamState::new(3);
        adam_step(&mut p, &[0.0; 3], &mut st, 0.1, ADAM_BETA1, ADAM_BETA2, ADAM_EPS).unwrap();
        assert_eq!(p, vec![1.5, -2.0, 0.25]);
        assert_eq!(st.steps_taken(), 1);
    }

    #[test]
    fn first_step_moves_by_about_the_learning_rate() {
        // After bias correction the first update is lr * g / (|g| + eps):
        // never larger than lr, and within 1% of lr once |g| >> eps.
        for &g in &[1e-6f64, 0.3, 5.0, -2.0e3] {
            let mut p = vec![0.0f64];
            let mut st = AdamState::new(1);
            adam_step(&mut p, &[g], &mut st, 0.01, ADAM_BETA1, ADAM_BETA2, ADAM_EPS).unwrap();
            let step = p[0].abs();
            assert!(step <= 0.01 + 1e-15 && step >= 0.99 * 0.01, "g={g} step {}", p[0]);
            assert!(p[0].signum() == -g.signum());
        }
    }

    #[test]
    fn converges_on_a_random_quadratic_bowl() {
        let mut rng = StreamRng::new(99);
        let n = 16;
        let scales: Vec<f64> = (0..n).map(|_| rng.uniform_in(0.5, 4.0)).collect();
        let target: Vec<f64> = (0..n).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
        let mut p: Vec<f64> = (0..n).map(|_| rng.uniform_in(-3.0, 3.0)).collect();
        let mut st = AdamState::new(n);
        let mut converged_at = None;
        for step in 0..2000 {
            let grads: Vec<f64> =
                (0..n).map(|i| 2.0 * scales[i] * (p[i] - target[i])).collect();
            adam_step(&mut p, &grads, &mut st, 1e-2, ADAM_BETA1, ADAM_BETA2, ADAM_EPS).unwrap();
            let worst =
                (0..n).map(|i| (p[i] - target[i]).abs()).fold(0.0f64, f64::max);
            if worst < 1e-6 {
                converged_at = Some(step + 1);
                break;
            }
        }
        assert!(converged_at.is_some(), "no convergence within 2000 steps");
    }

    #[test]
    fn schedule_endpoints_and_monotone_decay() {
        let lr = |e| lr_schedule(e, 1e-4, 1e-6, 25);
        assert!((lr(0) - 1e-4).abs() < 1e-18);
        assert!((lr(25) - 1e-6).abs() < 1e-18);
        assert!((lr(40) - 1e-6).abs() < 1e-18);
        for e in 0..25 {
            assert!(lr(e + 1) < lr(e), "not decreasing at {e}");
        }
        // Halfway in log space: 1e-5 is bracketed between epochs 12 and 13.
        assert!(lr(12) > 1e-5 && lr(13) < 1e-5);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut p = vec![0.0f64; 2];
        let mut st = AdamState::new(3);
        assert!(adam_step(&mut p, &[1.0, 1.0], &mut st, 0.1, 0.9, 0.999, 1e-8).is_err());
    }
}
