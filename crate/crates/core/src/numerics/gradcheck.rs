use crate::numerics::{NumericsError, Tensor};
use crate::scalar::Scalar;

/// Compares an analytic gradient against central differences.
///
/// `f` returns the scalar value at the given parameters together with its
/// analytic gradient; the gradient is only read at `theta` itself. The result
/// is the maximum over coordinates of
/// `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
pub fn finite_diff_check<T, F>(f: F, theta: &Tensor<T>, h: T) -> Result<T, NumericsError>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<(T, Tensor<T>), NumericsError>,
{
    finite_diff_check_with_floor(f, theta, h, T::of(1e-8))
}

/// [`finite_diff_check`] with an explicit denominator floor. Coordinates whose
/// gradient is below `floor` are then judged on absolute error
/// `|g_ad - g_fd| / floor`, which keeps rounding noise in `f` from dominating
/// the ratio for near-zero components.
pub fn finite_diff_check_with_floor<T, F>(mut f: F, theta: &Tensor<T>, h: T, floor: T) -> Result<T, NumericsError>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<(T, Tensor<T>), NumericsError>,
{
    if floor.is_nan() || floor <= T::zero() {
        return Err(NumericsError::InvalidArgument(format!(
            "denominator floor must be positive, got {floor}"
        )));
    }
    if !h.is_finite() || h <= T::zero() {
        return Err(NumericsError::InvalidArgument(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let (value, analytic) = f(theta)?;
    if !value.is_finite() {
        return Err(NumericsError::NumericError("f(theta) is not finite".into()));
    }
    if analytic.shape() != theta.shape() {
        return Err(NumericsError::ShapeError(format!(
            "gradient shape {:?} differs from parameters {:?}",
            analytic.shape(),
            theta.shape()
        )));
    }
    let mut probe = theta.clone();
    let mut worst = T::zero();
    for i in 0..theta.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let (plus, _) = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let (minus, _) = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(NumericsError::NumericError(format!(
                "f is not finite around coordinate {i}"
            )));
        }
        let fd = (plus - minus) / (h + h);
        let ad = analytic.data()[i];
        let rel = (ad - fd).abs() / floor.max(ad.abs() + fd.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_exact_gradient() {
        let theta = Tensor::new(&[1], vec![3.0f64]).unwrap();
        let err = finite_diff_check(
            |t| {
                let x = t.data()[0];
                Ok((x * x, Tensor::new(&[1], vec![2.0 * x]).unwrap()))
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn zero_step_rejected() {
        let theta = Tensor::new(&[1], vec![3.0f64]).unwrap();
        let r = finite_diff_check(|t| Ok((t.data()[0], t.clone())), &theta, 0.0);
        assert!(matches!(r, Err(NumericsError::InvalidArgument(_))));
    }

    #[test]
    fn non_finite_value_rejected() {
        let theta = Tensor::new(&[1], vec![0.0f64]).unwrap();
        let r = finite_diff_check(|t| Ok((1.0 / t.data()[0], t.clone())), &theta, 1e-3);
        assert!(matches!(r, Err(NumericsError::NumericError(_))));
    }
}
