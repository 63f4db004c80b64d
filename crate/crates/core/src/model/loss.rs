use ndarray::{Array1, ArrayView1};

use super::ModelError;
use crate::scalar::Scalar;

/// Log-sum-exp of a logit vector, shifted by its maximum.
pub fn log_sum_exp<T: Scalar>(logits: ArrayView1<T>) -> T {
    let max = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    max + logits.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln()
}

pub fn softmax<T: Scalar>(logits: ArrayView1<T>) -> Array1<T> {
    let lse = log_sum_exp(logits);
    logits.mapv(|v| (v - lse).exp())
}

/// Softmax cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy<T: Scalar>(logits: ArrayView1<T>, target: usize) -> Result<(T, Array1<T>), ModelError> {
    if target >= logits.len() {
        return Err(ModelError::TargetOutOfRange { target, classes: logits.len() });
    }
    let loss = log_sum_exp(logits) - logits[target];
    let mut grad = softmax(logits);
    grad[target] -= T::one();
    Ok((loss, grad))
}

/// Unweighted sum of the classification and hierarchical terms.
pub fn total_loss(cls: f64, hier: f64) -> Result<f64, ModelError> {
    if !cls.is_finite() || !hier.is_finite() {
        return Err(ModelError::NonFinite { cls, hier });
    }
    Ok(cls + hier)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_logits_give_ln_k() {
        for k in [2usize, 10, 79] {
            let z = Array1::<f64>::from_elem(k, 0.3);
            let (l, _) = cross_entropy(z.view(), k - 1).unwrap();
            assert!((l - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn large_margin_drives_loss_to_zero() {
        let (l, g) = cross_entropy(array![50.0f64, 0.0, -3.0].view(), 0).unwrap();
        assert!(l < 1e-20);
        assert!(g.iter().all(|v| v.abs() < 1e-20));
    }

    #[test]
    fn gradient_sums_to_zero_and_target_checked() {
        let (_, g) = cross_entropy(array![0.1f64, -0.4, 2.0, 0.7].view(), 2).unwrap();
        assert!(g.sum().abs() < 1e-12);
        assert!(cross_entropy(array![0.0f64, 1.0].view(), 2).is_err());
    }

    #[test]
    fn total_is_plain_sum() {
        assert_eq!(total_loss(2.0, 3.0).unwrap(), 5.0);
        assert!(total_loss(f64::NAN, 1.0).is_err());
        assert!(total_loss(1.0, f64::INFINITY).is_err());
    }
}
