//! Minimal differentiable substrate: dense networks with a recorded reverse
//! pass, softmax helpers, gradient reversal, Adam, weight perturbation and a
//! portable checkpoint container.

mod adam;
pub mod checkpoint;
mod dense;
mod perturb;

pub use adam::{AdamConfig, AdamState};
pub use dense::{Activation, Dense, DenseNet, GradTape, LayerGrad, NetGrads};
pub use perturb::{perturb_last_layer, perturb_last_layer_with, PerturbTarget};

use ndarray::{Array2, ArrayView2};

/// Numerically stable `log Σ exp(v)`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(v);
    v.iter().map(|x| (x - lse).exp()).collect()
}

pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(v);
    v.iter().map(|x| x - lse).collect()
}

/// Row-wise softmax of a batch of logits.
pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let p = softmax(&row.to_vec());
        row.iter_mut().zip(p).for_each(|(r, p)| *r = p);
    }
    out
}

/// Gradient reversal, value path: the identity.
pub fn grl(x: &[f64], _coeff: f64) -> Vec<f64> {
    x.to_vec()
}

/// Gradient reversal, gradient path: the incoming gradient times `-coeff`.
pub fn grl_backward(grad: &[f64], coeff: f64) -> Vec<f64> {
    grad.iter().map(|g| -coeff * g).collect()
}

pub(crate) fn grl_backward_batch(grad: &Array2<f64>, coeff: f64) -> Array2<f64> {
    grad * -coeff
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grl_forward_is_identity() {
        assert_eq!(grl(&[3.0, -1.0], 0.7), vec![3.0, -1.0]);
        assert_eq!(grl(&[3.0, -1.0], 0.0), vec![3.0, -1.0]);
    }

    #[test]
    fn grl_backward_flips_sign() {
        assert_eq!(grl_backward(&[2.0, 4.0], 1.0), vec![-2.0, -4.0]);
    }

    #[test]
    fn log_sum_exp_survives_large_inputs() {
        let v = [1000.0, 1000.0];
        assert!((log_sum_exp(&v) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(v in prop::collection::vec(-50.0f64..50.0, 1..8)) {
            let p = softmax(&v);
            prop_assert!(p.iter().all(|x| *x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn grl_value_path_is_bitwise_identity(v in prop::collection::vec(any::<f64>(), 0..8), c in 0.0f64..10.0) {
            let out = grl(&v, c);
            prop_assert!(out.iter().zip(&v).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
