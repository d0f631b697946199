//! Dense numeric substrate: matrices, masked softmax, affine/MLP layers,
//! seeded initialization, and a finite-difference gradient oracle.

mod gradcheck;
mod matrix;
mod mlp;
mod rng;

pub use gradcheck::{finite_diff_grad, max_relative_error, ParamTensor};
pub use matrix::{axpy, dot, Matrix};
pub use mlp::{Activation, Affine, Mlp, MlpCache};
pub use rng::SeededRng;

use crate::{Error, Result};

/// Numerically stable softmax over the unmasked entries of `logits`.
///
/// Masked entries come out exactly 0. If every entry is masked the result
/// is all zeros; callers that attend over an empty cache rely on this.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != mask.len() {
        return Err(Error::Shape(format!(
            "masked_softmax: {} logits vs {} mask entries",
            logits.len(),
            mask.len()
        )));
    }
    let mut max = f64::NEG_INFINITY;
    for (&x, &keep) in logits.iter().zip(mask) {
        if keep && x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        return Ok(vec![0.0; logits.len()]);
    }
    let mut out = vec![0.0; logits.len()];
    let mut sum = 0.0;
    for (i, (&x, &keep)) in logits.iter().zip(mask).enumerate() {
        if keep {
            let e = (x - max).exp();
            out[i] = e;
            sum += e;
        }
    }
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// Softmax with every entry unmasked.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    masked_softmax(logits, &vec![true; logits.len()]).expect("lengths match")
}

/// Backward pass of `masked_softmax`: given probabilities `p` and the
/// upstream gradient `d_p`, returns the gradient w.r.t. the logits.
/// Masked entries (p = 0) receive zero gradient.
pub fn softmax_backward(p: &[f64], d_p: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(d_p).map(|(&pi, &di)| pi * di).sum();
    p.iter().zip(d_p).map(|(&pi, &di)| pi * (di - dot)).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// SiLU activation x * sigmoid(x).
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_single_element() {
        assert_eq!(masked_softmax(&[2.7], &[true]).unwrap(), vec![1.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let p = masked_softmax(&[0.0, 0.0], &[true, true]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        // Direct evaluation of exp(x_i)/sum exp(x_j) without the max shift.
        let logits = [1.0f64, 2.0, 3.0];
        let exps: Vec<f64> = logits.iter().map(|x| x.exp()).collect();
        let sum: f64 = exps.iter().sum();
        let p = softmax(&logits);
        for (got, want) in p.iter().zip(exps.iter().map(|e| e / sum)) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_all_masked_returns_zeros() {
        let p = masked_softmax(&[1.0, 2.0], &[false, false]).unwrap();
        assert_eq!(p, vec![0.0, 0.0]);
    }

    #[test]
    fn softmax_masked_entries_zero() {
        let p = masked_softmax(&[5.0, 1.0, 2.0], &[false, true, true]).unwrap();
        assert_eq!(p[0], 0.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_length_mismatch_is_error() {
        assert!(masked_softmax(&[1.0], &[true, false]).is_err());
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let logits = [0.3, -1.2, 0.7, 2.0];
        let d_p = [1.0, -0.5, 0.25, 0.1];
        let p = softmax(&logits);
        let analytic = softmax_backward(&p, &d_p);
        let eps = 1e-6;
        for i in 0..logits.len() {
            let mut lp = logits;
            let mut lm = logits;
            lp[i] += eps;
            lm[i] -= eps;
            let f = |l: &[f64]| -> f64 {
                softmax(l).iter().zip(&d_p).map(|(p, d)| p * d).sum()
            };
            let numeric = (f(&lp) - f(&lm)) / (2.0 * eps);
            assert!((analytic[i] - numeric).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(logits in proptest::collection::vec(-20.0..20.0f64, 1..32)) {
            let p = softmax(&logits);
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0));
        }

        #[test]
        fn softmax_shift_invariant(
            logits in proptest::collection::vec(-20.0..20.0f64, 1..32),
            shift in -50.0..50.0f64,
        ) {
            let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
            let a = softmax(&logits);
            let b = softmax(&shifted);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }
    }
}
