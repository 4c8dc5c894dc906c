//! Binary cross-entropy on logits, in the overflow-safe form
//! `max(x, 0) - x*y + ln(1 + exp(-|x|))`, averaged over every element.
//! Returns the mean loss together with its gradient `(sigma(x) - y) / N`.

use crate::error::{Error, Result};
use crate::scalar::Real;

use super::tensor::Tensor4;

/// Mean binary cross-entropy of `logits` against hard targets and its
/// gradient with respect to the logits. Targets must be exactly 0 or 1.
pub fn bce_with_logits<T: Real>(logits: &Tensor4<T>, target: &Tensor4<T>) -> Result<(T, Tensor4<T>)> {
    if logits.shape() != target.shape() {
        return Err(Error::DimMismatch(format!(
            "logits {:?} vs targets {:?}",
            logits.shape(),
            target.shape()
        )));
    }
    if logits.is_empty() {
        return Err(Error::invalid("empty tensors have no loss"));
    }
    let n = T::of(logits.len() as f64);
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (&x, &y) in logits.data().iter().zip(target.data()) {
        if !(y == T::zero() || y == T::one()) {
            return Err(Error::invalid("targets must be exactly 0 or 1"));
        }
        total = total + x.max(T::zero()) - x * y + (T::one() + (-x.abs()).exp()).ln();
        let sigma = T::one() / (T::one() + (-x).exp());
        grad.push((sigma - y) / n);
    }
    let grad = Tensor4::new(logits.n, logits.c, logits.h, logits.w, grad)?;
    Ok((total / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnseg::gradcheck::{max_rel_err, numeric_grad};
    use crate::rng::StreamRng;

    #[test]
    fn zero_logits_cost_ln_two() {
        let logits = Tensor4::zeros(2, 1, 3, 3);
        let target = Tensor4::new(2, 1, 3, 3, vec![1.0; 18]).unwrap();
        let (loss, grad) = bce_with_logits(&logits, &target).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        // sigma(0) - 1 = -0.5, averaged over 18 elements.
        assert!(grad.data().iter().all(|&g| (g + 0.5 / 18.0).abs() < 1e-15));
    }

    #[test]
    fn confident_correct_logits_cost_almost_nothing() {
        let logits = Tensor4::new(1, 1, 2, 2, vec![20.0, -20.0, 30.0, -25.0]).unwrap();
        let target = Tensor4::new(1, 1, 2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let (loss, _) = bce_with_logits(&logits, &target).unwrap();
        assert!(loss < 1e-8, "loss {loss}");
        // Extreme logits stay finite.
        let big = Tensor4::new(1, 1, 1, 1, vec![1e4f64]).unwrap();
        let t0 = Tensor4::new(1, 1, 1, 1, vec![0.0f64]).unwrap();
        let (l, g) = bce_with_logits(&big, &t0).unwrap();
        assert!(l.is_finite() && g.at(0, 0, 0, 0).is_finite());
        assert!((l - 1e4).abs() < 1e-9);
    }

    #[test]
    fn loss_is_nonnegative_and_rejects_soft_targets() {
        let mut rng = StreamRng::new(7);
        for _ in 0..50 {
            let x = Tensor4::new(1, 1, 1, 4, (0..4).map(|_| rng.uniform_in(-5.0, 5.0)).collect())
                .unwrap();
            let y = Tensor4::new(
                1,
                1,
                1,
                4,
                (0..4).map(|_| if rng.uniform() < 0.5 { 0.0 } else { 1.0 }).collect(),
            )
            .unwrap();
            let (loss, _) = bce_with_logits(&x, &y).unwrap();
            assert!(loss >= 0.0);
        }
        let x = Tensor4::zeros(1, 1, 1, 1);
        let y = Tensor4::new(1, 1, 1, 1, vec![0.5]).unwrap();
        assert!(bce_with_logits(&x, &y).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences_tightly() {
        let mut rng = StreamRng::new(11);
        let n = 24;
        let xs: Vec<f64> = (0..n).map(|_| rng.uniform_in(-4.0, 4.0)).collect();
        let ys: Vec<f64> = (0..n).map(|_| if rng.uniform() < 0.5 { 0.0 } else { 1.0 }).collect();
        let target = Tensor4::new(2, 1, 3, 4, ys).unwrap();
        let f = |v: &[f64]| {
            let t = Tensor4::new(2, 1, 3, 4, v.to_vec()).unwrap();
            bce_with_logits(&t, &target).unwrap().0
        };
        let x = Tensor4::new(2, 1, 3, 4, xs.clone()).unwrap();
        let (_, grad) = bce_with_logits(&x, &target).unwrap();
        let fd = numeric_grad(f, &xs);
        let err = max_rel_err(grad.data(), &fd);
        assert!(err < 1e-6, "relative error {err}");
    }
}
