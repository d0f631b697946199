use crate::{Error, Result};

/// Learnable tensor: a shape, flat values, and a same-shape gradient
/// buffer that is zeroed between training steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

impl ParamTensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "tensor shape {:?} needs {} values, got {}",
                shape,
                expected,
                values.len()
            )));
        }
        let grad = vec![0.0; values.len()];
        Ok(ParamTensor { shape, values, grad })
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Central-difference gradient of a scalar function of a flat parameter
/// vector: (f(x + eps e_i) - f(x - eps e_i)) / 2 eps per coordinate.
///
/// `eps` must lie in (1e-8, 1e-2); a non-finite evaluation reports the
/// offending coordinate.
pub fn finite_diff_grad(
    f: impl Fn(&[f64]) -> f64,
    theta: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    if !(eps > 1e-8 && eps < 1e-2) {
        return Err(Error::Argument(format!(
            "finite_diff_grad: eps {eps} outside (1e-8, 1e-2)"
        )));
    }
    let mut work = theta.to_vec();
    let mut grad = vec![0.0; theta.len()];
    for i in 0..theta.len() {
        let orig = work[i];
        work[i] = orig + eps;
        let fp = f(&work);
        work[i] = orig - eps;
        let fm = f(&work);
        work[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite_diff_grad: f non-finite at coordinate {i}"
            )));
        }
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    Ok(grad)
}

/// Relative disagreement between an analytic and a numeric gradient:
/// max over coordinates of |a - b| / max(1, |a|, |b|).
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs()))
        .fold(0.0, f64::max)
}
