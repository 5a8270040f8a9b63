use crate::error::{Result, StaError};
use crate::numerics::Tensor;

/// Default central-difference step for double precision.
pub const DEFAULT_STEP: f64 = 1e-6;

/// Compares the analytic gradient returned by `f` against central finite
/// differences of its value, coordinate by coordinate.
///
/// Returns `max_i |a_i - n_i| / max(1, |a_i|, |n_i|)`.
pub fn gradcheck<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    if !(h > 0.0) {
        return Err(StaError::arg("finite-difference step must be positive"));
    }
    let (value, analytic) = f(x)?;
    if !value.is_finite() {
        return Err(StaError::Evaluation(format!("non-finite value {value} at base point")));
    }
    analytic.expect_shape("analytic gradient", x.shape())?;
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let (plus, _) = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let (minus, _) = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(StaError::Evaluation(format!("non-finite value while perturbing coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_zero_error() {
        let x = Tensor::from_vec(vec![0.3, -1.7, 4.0]);
        let err = gradcheck(|t| Ok((t.sum(), Tensor::full(t.shape(), 1.0))), &x, DEFAULT_STEP).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn square_sum_matches() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let f = |t: &Tensor| Ok((t.data().iter().map(|v| v * v).sum(), t.map(|v| 2.0 * v)));
        let (_, g) = f(&x).unwrap();
        assert_eq!(g.data(), &[2.0, 4.0]);
        assert!(gradcheck(f, &x, DEFAULT_STEP).unwrap() < 1e-8);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let err = gradcheck(|t| Ok((t.sum(), Tensor::full(t.shape(), 0.5))), &x, DEFAULT_STEP).unwrap();
        assert!(err > 0.4);
    }

    #[test]
    fn non_finite_is_an_error() {
        let x = Tensor::from_vec(vec![0.0]);
        let r = gradcheck(|t| Ok((1.0 / t.data()[0], t.clone())), &x, DEFAULT_STEP);
        assert!(matches!(r, Err(StaError::Evaluation(_))));
    }
}
